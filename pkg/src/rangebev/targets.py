"""Ground-truth generation: center heatmaps, density labels, box targets.

The center heatmap for a box is an unnormalized anisotropic Gaussian
evaluated in the box-local frame: coordinates are rotated by -yaw so one
axis follows the heading, with sigma_u = l / d and sigma_v = w / d (d is
the per-class sharpness divisor).  Cells outside the oriented footprint
are zero, and the cell nearest the true center is forced to exactly 1.0.
Overlapping boxes combine by elementwise max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bev import GridTransform, OrientedBox

NUM_CLASSES = 2           # 0 = large (car-like), 1 = small (pedestrian-like)
LARGE_SHARPNESS = 3.0     # sharpness divisor for large classes
SMALL_SHARPNESS = 6.0     # sharpness divisor for small classes
CENTER_MASK_THRESHOLD = 0.2  # tau: a cell carries box targets iff heatmap > tau
BOX_CHANNELS = 8          # dx, dy, z, log l, log w, log h, sin yaw, cos yaw


def sharpness_for_class(cls):
    if cls == 0:
        return LARGE_SHARPNESS
    if cls == 1:
        return SMALL_SHARPNESS
    raise ValueError(f"unknown class id {cls}")


@dataclass(frozen=True)
class DensityThresholds:
    """Per-class (T0, T1) point-count cut points, 0 < T0 < T1."""

    per_class: dict

    def __post_init__(self):
        for cls, (t0, t1) in self.per_class.items():
            if not (0 < t0 < t1):
                raise ValueError(f"class {cls}: need 0 < T0 < T1, got ({t0}, {t1})")

    def to_dict(self):
        return {str(k): list(v) for k, v in self.per_class.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({int(k): (v[0], v[1]) for k, v in d.items()})


def density_level(n, cls, thresholds: DensityThresholds):
    """1 = sparse (n < T0), 2 = adequate (T0 <= n < T1), 3 = dense (n >= T1)."""
    if n < 0:
        raise ValueError(f"point count must be non-negative, got {n}")
    if cls not in thresholds.per_class:
        raise ValueError(f"no density thresholds for class {cls}")
    t0, t1 = thresholds.per_class[cls]
    if n < t0:
        return 1
    if n < t1:
        return 2
    return 3


def nearest_rank_percentile(values, p):
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    v = sorted(values)
    if not v:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(p / 100.0 * len(v)))
    return v[rank - 1]


def fit_thresholds(boxes, p_lo=30.0, p_hi=70.0, min_per_class=10):
    """Fit per-class (T0, T1) from box point counts at the given percentiles."""
    by_class = {}
    for b in boxes:
        by_class.setdefault(b.cls, []).append(b.num_points)
    per_class = {}
    for cls, counts in sorted(by_class.items()):
        if len(counts) < min_per_class:
            raise ValueError(
                f"class {cls}: need at least {min_per_class} boxes to fit "
                f"thresholds, got {len(counts)}"
            )
        t0 = nearest_rank_percentile(counts, p_lo)
        t1 = nearest_rank_percentile(counts, p_hi)
        if not (0 < t0 < t1):
            raise ValueError(
                f"class {cls}: degenerate count distribution, "
                f"percentiles give T0={t0}, T1={t1}"
            )
        per_class[cls] = (t0, t1)
    return DensityThresholds(per_class)


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------

def anisotropic_gaussian_patch(box: OrientedBox, tf: GridTransform, d_cls,
                               isotropic=False):
    """Gaussian contribution of one box on the grid.

    Returns (i0, j0, patch) where patch covers the cell window
    [i0, i0+patch.shape[0]) x [j0, j0+patch.shape[1]).
    """
    if d_cls <= 0:
        raise ValueError(f"sharpness divisor must be positive, got {d_cls}")
    corners = box.corners_bev()
    i_lo, j_lo = tf.ego_to_cell(corners[:, 0].min(), corners[:, 1].min())
    i_hi, j_hi = tf.ego_to_cell(corners[:, 0].max(), corners[:, 1].max())
    i0 = int(max(0, min(i_lo, i_hi)))
    j0 = int(max(0, min(j_lo, j_hi)))
    i1 = int(min(tf.height - 1, max(i_lo, i_hi)))
    j1 = int(min(tf.width - 1, max(j_lo, j_hi)))
    ci, cj = tf.ego_to_cell(box.cx, box.cy)
    ci = int(np.clip(ci, 0, tf.height - 1))
    cj = int(np.clip(cj, 0, tf.width - 1))
    if i1 < i0 or j1 < j0 or box.l < tf.dx or box.w < tf.dy:
        # Degenerate footprint: single-cell peak at the center cell.
        return ci, cj, np.ones((1, 1), dtype=np.float64)
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    x, y = tf.cell_center(ii, jj)
    dx, dy = x - box.cx, y - box.cy
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    if isotropic:
        sigma = min(box.l, box.w) / d_cls
        sigma_u = sigma_v = sigma
    else:
        sigma_u = box.l / d_cls
        sigma_v = box.w / d_cls
    inside = (np.abs(u) <= box.l / 2.0) & (np.abs(v) <= box.w / 2.0)
    patch = np.where(
        inside,
        np.exp(-0.5 * ((u / sigma_u) ** 2 + (v / sigma_v) ** 2)),
        0.0,
    )
    if i0 <= ci <= i1 and j0 <= cj <= j1:
        patch[ci - i0, cj - j0] = 1.0
    return i0, j0, patch


def render_heatmap(boxes, tf: GridTransform, isotropic=False):
    """K x H x W heatmap; overlapping contributions combine by max."""
    hm = np.zeros((NUM_CLASSES, tf.height, tf.width), dtype=np.float64)
    for b in boxes:
        i0, j0, patch = anisotropic_gaussian_patch(
            b, tf, sharpness_for_class(b.cls), isotropic=isotropic
        )
        view = hm[b.cls, i0 : i0 + patch.shape[0], j0 : j0 + patch.shape[1]]
        np.maximum(view, patch, out=view)
    return hm


# ---------------------------------------------------------------------------
# regression targets
# ---------------------------------------------------------------------------

@dataclass
class TargetMaps:
    heatmap: np.ndarray        # K x H x W in [0, 1]
    box_targets: np.ndarray    # BOX_CHANNELS x H x W
    valid_mask: np.ndarray     # H x W bool, true iff max-class heatmap > tau
    centers: np.ndarray        # M x 3 int: (class, row, col) per box, box order
    density_labels: np.ndarray  # M ints in {1, 2, 3}; empty if no thresholds


def encode_box(box: OrientedBox, cell_x, cell_y, raw_dims=False):
    dims = (box.l, box.w, box.h) if raw_dims else (
        math.log(box.l), math.log(box.w), math.log(box.h)
    )
    return np.array([
        box.cx - cell_x, box.cy - cell_y, box.cz,
        dims[0], dims[1], dims[2],
        math.sin(box.yaw), math.cos(box.yaw),
    ])


def regression_targets(boxes, tf: GridTransform, thresholds=None,
                       isotropic=False, raw_dims=False,
                       tau=CENTER_MASK_THRESHOLD) -> TargetMaps:
    """Render heatmap, per-cell box channels, validity mask, density labels.

    Each cell above tau is owned by the box with the largest heatmap
    contribution there (peaks stay exact because footprints carry a forced
    1.0 at the center cell).
    """
    h, w = tf.height, tf.width
    hm = np.zeros((NUM_CLASSES, h, w), dtype=np.float64)
    best = np.zeros((h, w), dtype=np.float64)
    box_t = np.zeros((BOX_CHANNELS, h, w), dtype=np.float64)
    centers = []
    labels = []
    for b in boxes:
        i0, j0, patch = anisotropic_gaussian_patch(
            b, tf, sharpness_for_class(b.cls), isotropic=isotropic
        )
        si = slice(i0, i0 + patch.shape[0])
        sj = slice(j0, j0 + patch.shape[1])
        np.maximum(hm[b.cls, si, sj], patch, out=hm[b.cls, si, sj])
        own = patch > best[si, sj]
        if own.any():
            ii, jj = np.nonzero(own)
            x, y = tf.cell_center(ii + i0, jj + j0)
            enc = np.stack([
                encode_box(b, xc, yc, raw_dims=raw_dims) for xc, yc in zip(x, y)
            ], axis=1)
            box_t[:, ii + i0, jj + j0] = enc
            best[si, sj] = np.where(own, patch, best[si, sj])
        pi, pj = np.unravel_index(np.argmax(patch), patch.shape)
        centers.append((b.cls, pi + i0, pj + j0))
        if thresholds is not None:
            labels.append(density_level(b.num_points, b.cls, thresholds))
    valid = hm.max(axis=0) > tau
    return TargetMaps(
        heatmap=hm,
        box_targets=box_t,
        valid_mask=valid,
        centers=np.asarray(centers, dtype=np.int64).reshape(-1, 3),
        density_labels=np.asarray(labels, dtype=np.int64),
    )


def decode_cell(channels, cell_x, cell_y, raw_dims=False):
    """Inverse of ``encode_box`` at one cell; returns an OrientedBox."""
    dx, dy, cz, d0, d1, d2, sn, cs = [float(v) for v in channels]
    if raw_dims:
        l, wd, ht = d0, d1, d2
    else:
        l, wd, ht = math.exp(d0), math.exp(d1), math.exp(d2)
    return OrientedBox(
        cx=cell_x + dx, cy=cell_y + dy, cz=cz,
        l=l, w=wd, h=ht, yaw=math.atan2(sn, cs),
    )
