"""Head-output decoding and evaluation: peak extraction, box decoding,
rotated IoU via polygon clipping, greedy NMS, and average precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bev import GridTransform, OrientedBox
from .targets import decode_cell

DEFAULT_SCORE_THRESHOLD = 0.1
DEFAULT_NMS_IOU = 0.2


@dataclass
class Detection:
    box: OrientedBox
    score: float
    cls: int

    def to_dict(self, frame=None):
        d = {"class": self.cls, "score": self.score}
        if frame is not None:
            d["frame"] = frame
        d.update({k: v for k, v in self.box.to_dict().items()
                  if k not in ("class", "num_points")})
        return d


def extract_peaks(heatmap, window=3, score_threshold=DEFAULT_SCORE_THRESHOLD,
                  max_peaks=None):
    """Strict local maxima of a K x H x W heatmap.

    A cell survives only if it is strictly greater than every other cell
    in its window x window neighborhood (plateaus yield nothing) and meets
    the score threshold.  Results are ordered by class then row-major cell.
    With max_peaks set, only the highest-scoring peaks are kept (ties broken
    by that same ordering), which bounds the cost of the NMS that follows.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    hm = np.asarray(heatmap, dtype=np.float64)
    k, h, w = hm.shape
    r = window // 2
    pad = np.pad(hm, ((0, 0), (r, r), (r, r)), constant_values=-np.inf)
    peaks = []
    for cls in range(k):
        plane = hm[cls]
        neigh_max = np.full((h, w), -np.inf)
        neigh_cnt = np.zeros((h, w))
        for a in range(window):
            for b in range(window):
                sl = pad[cls, a : a + h, b : b + w]
                np.maximum(neigh_max, sl, out=neigh_max)
                neigh_cnt += sl == plane
        # neigh_cnt counts window cells equal to the center, incl. itself.
        is_peak = (plane >= score_threshold) & (plane == neigh_max) & (neigh_cnt == 1)
        for i, j in zip(*np.nonzero(is_peak)):
            peaks.append((cls, int(i), int(j), float(plane[i, j])))
    if max_peaks is not None and len(peaks) > max_peaks:
        ranked = sorted(range(len(peaks)), key=lambda n: (-peaks[n][3], n))
        keep = sorted(ranked[:max_peaks])
        peaks = [peaks[n] for n in keep]
    return peaks


def decode_boxes(peaks, box_map, tf: GridTransform, raw_dims=False):
    """Turn (class, i, j, score) peaks plus the 8-channel map into detections."""
    bm = np.asarray(box_map, dtype=np.float64)
    dets = []
    for cls, i, j, score in peaks:
        x, y = tf.cell_center(i, j)
        box = decode_cell(bm[:, i, j], float(x), float(y), raw_dims=raw_dims)
        box.cls = cls
        dets.append(Detection(box=box, score=score, cls=cls))
    return dets


# ---------------------------------------------------------------------------
# rotated IoU
# ---------------------------------------------------------------------------

def _clip_polygon(poly, a, b):
    """Sutherland-Hodgman: keep the side of edge a->b that is to its left."""
    out = []
    n = len(poly)
    ex, ey = b[0] - a[0], b[1] - a[1]

    def inside(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0]) >= 0

    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        pin, qin = inside(p), inside(q)
        if pin:
            out.append(p)
        if pin != qin:
            dx, dy = q[0] - p[0], q[1] - p[1]
            denom = ex * dy - ey * dx
            if denom != 0:
                t = (ey * (p[0] - a[0]) - ex * (p[1] - a[1])) / denom
                out.append((p[0] + t * dx, p[1] + t * dy))
    return out


def _polygon_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2.0


def rotated_iou(a: OrientedBox, b: OrientedBox):
    """BEV IoU of two oriented rectangles by convex polygon clipping.

    Exactly symmetric and exactly 1 for identical footprints: the pair is
    put in a canonical order before clipping (clipping itself is not
    numerically commutative), and coincident rectangles short-circuit.
    """
    key_a = (a.cx, a.cy, a.l, a.w, a.yaw)
    key_b = (b.cx, b.cy, b.l, b.w, b.yaw)
    if key_a == key_b:
        return 1.0 if a.l * a.w >= 1e-12 else 0.0
    if key_b < key_a:
        a, b = b, a
    area_a = a.l * a.w
    area_b = b.l * b.w
    if area_a < 1e-12 or area_b < 1e-12:
        return 0.0
    poly = [tuple(p) for p in a.corners_bev()]
    cb = [tuple(p) for p in b.corners_bev()]
    for i in range(4):
        poly = _clip_polygon(poly, cb[i], cb[(i + 1) % 4])
        if not poly:
            return 0.0
    inter = _polygon_area(poly)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def rotated_iou_raster(a: OrientedBox, b: OrientedBox, cells=1000):
    """Rasterization oracle for rotated IoU on a cells x cells grid."""
    xs = np.concatenate([a.corners_bev()[:, 0], b.corners_bev()[:, 0]])
    ys = np.concatenate([a.corners_bev()[:, 1], b.corners_bev()[:, 1]])
    x0, x1 = xs.min() - 0.01, xs.max() + 0.01
    y0, y1 = ys.min() - 0.01, ys.max() + 0.01
    gx = np.linspace(x0, x1, cells, endpoint=False) + (x1 - x0) / (2 * cells)
    gy = np.linspace(y0, y1, cells, endpoint=False) + (y1 - y0) / (2 * cells)
    xx, yy = np.meshgrid(gx, gy)

    def inside(box):
        dx, dy = xx - box.cx, yy - box.cy
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (np.abs(u) <= box.l / 2.0) & (np.abs(v) <= box.w / 2.0)

    ia, ib = inside(a), inside(b)
    inter = float((ia & ib).sum())
    union = float((ia | ib).sum())
    return inter / union if union else 0.0


# ---------------------------------------------------------------------------
# NMS and AP
# ---------------------------------------------------------------------------

def nms(dets, iou_threshold=DEFAULT_NMS_IOU):
    """Greedy per-class suppression by descending score (ties by index)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    # Bounding-circle radii: two boxes whose centers are farther apart than
    # the sum of their half-diagonals cannot overlap, so skip the clipping.
    radius = [0.5 * math.hypot(d.box.l, d.box.w) for d in dets]
    keep = []
    removed = set()
    for i in order:
        if i in removed:
            continue
        keep.append(dets[i])
        bi = dets[i].box
        for j in order:
            if j == i or j in removed or dets[j].cls != dets[i].cls:
                continue
            bj = dets[j].box
            if math.hypot(bi.cx - bj.cx, bi.cy - bj.cy) > radius[i] + radius[j]:
                continue
            if rotated_iou(bi, bj) >= iou_threshold:
                removed.add(j)
    return keep


@dataclass
class EvalReport:
    per_class_ap: dict          # class -> AP in [0,1] or None if no GT
    pr_curves: dict             # class -> list of (recall, precision)
    counts: dict                # class -> {"tp": n, "fp": n, "fn": n}

    @property
    def mean_ap(self):
        vals = [v for v in self.per_class_ap.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self):
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "mean_ap": self.mean_ap,
            "pr_curves": {str(k): v for k, v in self.pr_curves.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
        }


def _ap_from_matches(match_flags, n_gt):
    """All-point interpolated AP from score-ordered TP/FP flags."""
    if n_gt == 0:
        return None, []
    tp = np.cumsum(match_flags)
    fp = np.cumsum(1 - np.asarray(match_flags))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # Precision envelope, then area under it over recall.
    mrec = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(1, len(mrec)):
        ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    curve = list(zip(recall.tolist(), precision.tolist()))
    return float(ap), curve


def average_precision(detections, ground_truths, iou_threshold=0.5,
                      num_classes=None):
    """Per-class AP with greedy best-IoU matching.

    ``detections`` is a list of (frame_id, Detection); ``ground_truths`` a
    list of (frame_id, OrientedBox).
    """
    classes = sorted(
        {d.cls for _, d in detections} | {g.cls for _, g in ground_truths}
        | set(range(num_classes) if num_classes else [])
    )
    per_class_ap, curves, counts = {}, {}, {}
    for cls in classes:
        gts = [(f, g) for f, g in ground_truths if g.cls == cls]
        dets = sorted(
            [(f, d) for f, d in detections if d.cls == cls],
            key=lambda fd: -fd[1].score,
        )
        matched = set()
        flags = []
        for f, d in dets:
            best_iou, best_idx = 0.0, None
            for gi, (gf, g) in enumerate(gts):
                if gf != f or gi in matched:
                    continue
                iou = rotated_iou(d.box, g)
                if iou > best_iou:
                    best_iou, best_idx = iou, gi
            if best_idx is not None and best_iou >= iou_threshold:
                matched.add(best_idx)
                flags.append(1)
            else:
                flags.append(0)
        ap, curve = _ap_from_matches(flags, len(gts))
        per_class_ap[cls] = ap
        curves[cls] = curve
        tp = int(np.sum(flags)) if flags else 0
        counts[cls] = {"tp": tp, "fp": len(flags) - tp, "fn": len(gts) - tp}
    return EvalReport(per_class_ap=per_class_ap, pr_curves=curves, counts=counts)
