"""Synthetic range-sparse scenes.

A scene is a set of non-overlapping oriented boxes plus ground clutter,
sampled around the sensor at the origin.  Surface points come from 2-d
ray casting at a fixed angular step, so the hit count per object falls
roughly as 1/range; each ray that hits an object yields one point per
elevation ring.  Unannotated "wall" occluders shadow rays, thinning out
the objects behind them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bev import OrientedBox

CLASS_LARGE = 0
CLASS_SMALL = 1


@dataclass(frozen=True)
class SceneSpec:
    boxes_min: int = 2
    boxes_max: int = 6
    small_fraction: float = 0.4       # probability a sampled box is small-class
    radius_range: tuple = (4.0, 24.0)
    min_center_gap: float = 3.0       # keeps peak cells separable on the head grid
    angular_step: float = 0.005       # radians between azimuth rays
    rings: int = 4                    # elevation samples per surviving ray
    range_noise: float = 0.02         # radial jitter sigma, meters
    occluder_prob: float = 0.3        # per-scene probability of one wall occluder
    clutter_points: int = 400

    def __post_init__(self):
        if self.angular_step <= 0:
            raise ValueError("angular step must be positive")
        if self.boxes_min < 0 or self.boxes_max < self.boxes_min:
            raise ValueError("invalid box count range")


def _sample_box(rng, spec):
    small = rng.random() < spec.small_fraction
    if small:
        l = float(rng.uniform(0.6, 0.9))
        w = float(rng.uniform(0.6, 0.9))
        h = float(rng.uniform(1.5, 1.9))
        cls = CLASS_SMALL
    else:
        l = float(rng.uniform(4.0, 5.0))
        w = float(rng.uniform(1.7, 2.1))
        h = float(rng.uniform(1.4, 1.8))
        cls = CLASS_LARGE
    radius = float(rng.uniform(*spec.radius_range))
    phi = float(rng.uniform(-math.pi, math.pi))
    return OrientedBox(
        cx=radius * math.cos(phi), cy=radius * math.sin(phi),
        cz=float(-1.0 + h / 2.0), l=l, w=w, h=h,
        yaw=float(rng.uniform(-math.pi, math.pi)), cls=cls,
    )


def _ray_hits(box: OrientedBox, angles):
    """Entry distance of each origin ray into the box footprint (inf = miss)."""
    dx = np.cos(angles)
    dy = np.sin(angles)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # Ray in the box-local frame: origin o + t * direction d.
    ou = -(box.cx * c + box.cy * s)
    ov = box.cx * s - box.cy * c
    du = dx * c + dy * s
    dv = -dx * s + dy * c
    t = np.full(angles.shape, np.inf)
    hu, hv = box.l / 2.0, box.w / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-hu - ou) / du  # slab entries/exits along u
        t2 = (hu - ou) / du
        t3 = (-hv - ov) / dv
        t4 = (hv - ov) / dv
    tu_min, tu_max = np.minimum(t1, t2), np.maximum(t1, t2)
    tv_min, tv_max = np.minimum(t3, t4), np.maximum(t3, t4)
    t_enter = np.maximum(tu_min, tv_min)
    t_exit = np.minimum(tu_max, tv_max)
    hit = (t_exit >= t_enter) & (t_exit > 0)
    t[hit] = np.maximum(t_enter[hit], 0.0)
    return t


def cast_rays(boxes, occluders, spec: SceneSpec, rng):
    """Ray-cast points for annotated boxes with occluder shadowing.

    Returns (points array N x 4, hit counts per annotated box).
    """
    n_rays = int(round(2.0 * math.pi / spec.angular_step))
    angles = np.arange(n_rays) * spec.angular_step
    all_solids = list(boxes) + list(occluders)
    if not all_solids:
        return np.zeros((0, 4)), [0] * len(boxes)
    t_all = np.stack([_ray_hits(b, angles) for b in all_solids])
    winner = np.argmin(t_all, axis=0)
    t_best = t_all[winner, np.arange(n_rays)]
    points = []
    counts = [0] * len(boxes)
    for idx, solid in enumerate(all_solids):
        sel = (winner == idx) & np.isfinite(t_best)
        if not sel.any():
            continue
        t = t_best[sel]
        a = angles[sel]
        for ring in range(spec.rings):
            tr = t + rng.normal(0.0, spec.range_noise, size=t.shape)
            z = solid.cz - solid.h / 2.0 + solid.h * (ring + 0.5) / spec.rings
            inten = rng.uniform(0.2, 1.0, size=t.shape)
            pts = np.stack(
                [tr * np.cos(a), tr * np.sin(a), np.full_like(tr, z), inten], axis=1
            )
            points.append(pts)
        if idx < len(boxes):
            counts[idx] = int(sel.sum()) * spec.rings
    pts = np.concatenate(points, axis=0) if points else np.zeros((0, 4))
    return pts, counts


def synth_scene(seed, spec: SceneSpec, extent=25.0):
    """Deterministic synthetic scene: (points N x 4, annotated boxes)."""
    rng = np.random.default_rng(seed)
    n_boxes = int(rng.integers(spec.boxes_min, spec.boxes_max + 1))
    boxes = []
    attempts = 0
    while len(boxes) < n_boxes and attempts < 50 * max(1, n_boxes):
        attempts += 1
        cand = _sample_box(rng, spec)
        if abs(cand.cx) > extent - 3.0 or abs(cand.cy) > extent - 3.0:
            continue
        gap_ok = all(
            math.hypot(cand.cx - b.cx, cand.cy - b.cy)
            >= spec.min_center_gap + (cand.l + b.l) / 4.0
            for b in boxes
        )
        if gap_ok:
            boxes.append(cand)
    occluders = []
    if rng.random() < spec.occluder_prob and boxes:
        # A wall at roughly half the range of a random annotated box.
        tgt = boxes[int(rng.integers(len(boxes)))]
        frac = float(rng.uniform(0.35, 0.6))
        occluders.append(OrientedBox(
            cx=tgt.cx * frac, cy=tgt.cy * frac, cz=0.0,
            l=float(rng.uniform(2.5, 4.5)), w=0.3, h=2.4,
            yaw=math.atan2(tgt.cy, tgt.cx) + math.pi / 2.0, cls=CLASS_LARGE,
        ))
    pts, counts = cast_rays(boxes, occluders, spec, rng)
    for b, n in zip(boxes, counts):
        b.num_points = n
    boxes = [b for b in boxes if b.num_points > 0]
    if spec.clutter_points:
        cl = np.stack([
            rng.uniform(-extent, extent, size=spec.clutter_points),
            rng.uniform(-extent, extent, size=spec.clutter_points),
            rng.uniform(-1.1, -0.8, size=spec.clutter_points),
            rng.uniform(0.0, 0.4, size=spec.clutter_points),
        ], axis=1)
        pts = np.concatenate([pts, cl], axis=0)
    return pts, boxes
