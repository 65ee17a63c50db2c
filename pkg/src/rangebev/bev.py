"""Point-cloud ingestion, pillar-style BEV encoding, and augmentation.

Points are (x, y, z, intensity) in the ego frame.  The BEV grid maps row i
to y and column j to x; each pillar aggregates the points of one vertical
column into 6 channels:

    0 log1p(point count)      3 mean intensity
    1 mean z                  4 mean x-offset from the cell center
    2 max z                   5 mean y-offset from the cell center

Empty pillars are all-zero.  z limits only filter points; there is no
vertical binning.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)

POINT_BYTES = 16  # four little-endian float32 per point


def normalize_yaw(theta):
    """Wrap an angle to [-pi, pi)."""
    return float((theta + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass
class OrientedBox:
    """7-DoF box: center, dims (l along heading, w across, h up), yaw."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    cls: int = 0
    num_points: int = 0

    def __post_init__(self):
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box dims must be positive, got {self.l}, {self.w}, {self.h}")
        self.yaw = normalize_yaw(self.yaw)

    def corners_bev(self):
        """4x2 array of the BEV footprint corners, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def to_dict(self):
        return {
            "cx": self.cx, "cy": self.cy, "cz": self.cz,
            "l": self.l, "w": self.w, "h": self.h,
            "yaw": self.yaw, "class": self.cls, "num_points": self.num_points,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            cx=d["cx"], cy=d["cy"], cz=d["cz"], l=d["l"], w=d["w"], h=d["h"],
            yaw=d["yaw"], cls=d["class"], num_points=d["num_points"],
        )


@dataclass(frozen=True)
class VoxelConfig:
    x_range: tuple = (-25.6, 25.6)
    y_range: tuple = (-25.6, 25.6)
    z_range: tuple = (-3.0, 3.0)
    cell: tuple = (0.4, 0.4)  # (dx, dy) meters

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if hi <= lo:
                raise ValueError(f"range max must exceed min, got ({lo}, {hi})")
        for n, name in ((self.width, "x"), (self.height, "y")):
            span = (self.x_range if name == "x" else self.y_range)
            d = self.cell[0] if name == "x" else self.cell[1]
            if abs((span[1] - span[0]) / d - n) > 1e-6:
                raise ValueError(
                    f"{name}-extent {span} is not an integer number of "
                    f"{d} m cells"
                )

    @property
    def width(self):
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell[0]))

    @property
    def height(self):
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell[1]))


# Paper-scale presets plus the small default grid used for desk runs.
# KITTI's published y-extent is trimmed by 0.01 m so the grid is integral.
PRESETS = {
    "desk": VoxelConfig(),
    "nuscenes": VoxelConfig(
        x_range=(-54.0, 54.0), y_range=(-54.0, 54.0), z_range=(-5.0, 3.0),
        cell=(0.075, 0.075),
    ),
    "kitti": VoxelConfig(
        x_range=(0.0, 69.12), y_range=(-39.68, 39.68), z_range=(-3.5, 1.5),
        cell=(0.16, 0.16),
    ),
}

BEV_CHANNELS = 6


@dataclass
class GridTransform:
    """Affine map between cell indices (row, col) and ego-frame meters."""

    x_min: float
    y_min: float
    dx: float
    dy: float
    height: int
    width: int

    def cell_center(self, i, j):
        return (
            self.x_min + (np.asarray(j) + 0.5) * self.dx,
            self.y_min + (np.asarray(i) + 0.5) * self.dy,
        )

    def ego_to_cell(self, x, y):
        j = np.floor((np.asarray(x) - self.x_min) / self.dx).astype(np.int64)
        i = np.floor((np.asarray(y) - self.y_min) / self.dy).astype(np.int64)
        return i, j

    def downsample(self, factor):
        if self.height % factor or self.width % factor:
            raise ValueError(f"grid {self.height}x{self.width} not divisible by {factor}")
        return GridTransform(
            x_min=self.x_min, y_min=self.y_min,
            dx=self.dx * factor, dy=self.dy * factor,
            height=self.height // factor, width=self.width // factor,
        )


@dataclass
class BevGrid:
    features: Tensor  # 1 x BEV_CHANNELS x H x W
    transform: GridTransform


def transform_for(config: VoxelConfig) -> GridTransform:
    return GridTransform(
        x_min=config.x_range[0], y_min=config.y_range[0],
        dx=config.cell[0], dy=config.cell[1],
        height=config.height, width=config.width,
    )


# ---------------------------------------------------------------------------
# binary point-cloud files
# ---------------------------------------------------------------------------

def load_point_cloud(path):
    """Read little-endian float32 (x, y, z, intensity) quadruples."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % POINT_BYTES:
        offset = len(raw) - len(raw) % POINT_BYTES
        raise ValueError(
            f"{path}: truncated point record at byte offset {offset} "
            f"(file size {len(raw)} is not a multiple of {POINT_BYTES})"
        )
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        logger.warning("%s: dropped %d non-finite points", path, int(bad.sum()))
        pts = pts[~bad]
    return pts


def save_point_cloud(path, points):
    arr = np.ascontiguousarray(np.asarray(points, dtype=np.float64), dtype="<f4")
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"points must be N x 4, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(arr.tobytes())


def load_boxes(path):
    boxes = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                boxes.append(OrientedBox.from_dict(json.loads(line)))
    return boxes


def save_boxes(path, boxes):
    with open(path, "w") as f:
        for b in boxes:
            f.write(json.dumps(b.to_dict()) + "\n")


# ---------------------------------------------------------------------------
# pillarization
# ---------------------------------------------------------------------------

def pillarize(points, config: VoxelConfig) -> BevGrid:
    """Aggregate a point array (N x 4) into a 6-channel BEV grid."""
    tf = transform_for(config)
    h, w = config.height, config.width
    feats = np.zeros((BEV_CHANNELS, h, w), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if pts.shape[0]:
        x, y, z, inten = pts.T
        keep = (
            (x >= config.x_range[0]) & (x < config.x_range[1])
            & (y >= config.y_range[0]) & (y < config.y_range[1])
            & (z >= config.z_range[0]) & (z <= config.z_range[1])
        )
        x, y, z, inten = x[keep], y[keep], z[keep], inten[keep]
        if x.size:
            i, j = tf.ego_to_cell(x, y)
            flat = i * w + j
            n = h * w
            count = np.bincount(flat, minlength=n)
            sum_z = np.bincount(flat, weights=z, minlength=n)
            sum_int = np.bincount(flat, weights=inten, minlength=n)
            cx, cy = tf.cell_center(i, j)
            sum_ox = np.bincount(flat, weights=x - cx, minlength=n)
            sum_oy = np.bincount(flat, weights=y - cy, minlength=n)
            max_z = np.full(n, -np.inf)
            np.maximum.at(max_z, flat, z)
            occ = count > 0
            safe = np.maximum(count, 1)
            feats[0] = np.log1p(count).reshape(h, w)
            feats[1] = np.where(occ, sum_z / safe, 0.0).reshape(h, w)
            feats[2] = np.where(occ, max_z, 0.0).reshape(h, w)
            feats[3] = np.where(occ, sum_int / safe, 0.0).reshape(h, w)
            feats[4] = np.where(occ, sum_ox / safe, 0.0).reshape(h, w)
            feats[5] = np.where(occ, sum_oy / safe, 0.0).reshape(h, w)
    return BevGrid(features=Tensor(feats[None].astype(np.float32)), transform=tf)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def apply_augmentation(points, boxes, flip, angle, scale):
    """Deterministic scene transform: optional y-flip, z-rotation, scaling."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4).copy()
    out_boxes = []
    c, s = math.cos(angle), math.sin(angle)
    if flip:
        pts[:, 1] = -pts[:, 1]
    x = pts[:, 0] * c - pts[:, 1] * s
    y = pts[:, 0] * s + pts[:, 1] * c
    pts[:, 0] = x * scale
    pts[:, 1] = y * scale
    pts[:, 2] *= scale
    for b in boxes:
        cx, cy, yaw = b.cx, b.cy, b.yaw
        if flip:
            cy, yaw = -cy, -yaw
        nx = (cx * c - cy * s) * scale
        ny = (cx * s + cy * c) * scale
        out_boxes.append(OrientedBox(
            cx=nx, cy=ny, cz=b.cz * scale,
            l=b.l * scale, w=b.w * scale, h=b.h * scale,
            yaw=yaw + angle, cls=b.cls, num_points=b.num_points,
        ))
    return pts, out_boxes


def augment(points, boxes, seed, scale_range=(0.95, 1.05)):
    """Sampled augmentation: y-flip with p=0.5, rotation in [-pi/4, pi/4],
    global scale in ``scale_range``."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-math.pi / 4.0, math.pi / 4.0))
    scale = float(rng.uniform(*scale_range))
    return apply_augmentation(points, boxes, flip, angle, scale)


def points_in_box(points, box: OrientedBox, tol=0.0):
    """Boolean mask of points inside the box (3-d membership)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (
        (np.abs(u) <= box.l / 2.0 + tol)
        & (np.abs(v) <= box.w / 2.0 + tol)
        & (np.abs(pts[:, 2] - box.cz) <= box.h / 2.0 + tol)
    )
