"""Position and range encoding maps for the attention layers.

The maps depend only on the feature-map shape, never on its contents, so
they are cached per (H, W, dtype) and carry no gradient.  With 1-based
indices i in 1..H, j in 1..W:

    r_ij = 2|i - H/2| / H
    c_ij = 2|j - W/2| / W
    rho_ij = 2 sqrt((r^2 + c^2) / 2) - 1

r and c lie in [0, 1]; the sqrt(2)-normalized radial term keeps rho in
[-1, 1] exactly (-1 where r = c = 0, +1 at the extreme corners).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class EncodingMaps:
    xi: Tensor    # 1 x 2 x H x W; channel 0 = row encoding, 1 = column
    rho: Tensor   # 1 x 1 x H x W


_cache = {}
_cache_lock = threading.Lock()


def encoding_arrays(h, w, dtype=np.float64):
    """Raw (r, c, rho) arrays of shape H x W each."""
    if h < 1 or w < 1:
        raise ValueError(f"encoding dims must be positive, got {h}x{w}")
    i = np.arange(1, h + 1, dtype=dtype)
    j = np.arange(1, w + 1, dtype=dtype)
    r = (2.0 * np.abs(i - h / 2.0) / h)[:, None] * np.ones((1, w), dtype=dtype)
    c = np.ones((h, 1), dtype=dtype) * (2.0 * np.abs(j - w / 2.0) / w)[None, :]
    rho = 2.0 * np.sqrt((r * r + c * c) / 2.0) - 1.0
    return r, c, rho


def make_encodings(h, w, dtype=np.float32):
    """Cached constant encoding tensors at resolution H x W."""
    key = (h, w, np.dtype(dtype).name)
    with _cache_lock:
        hit = _cache.get(key)
    if hit is not None:
        return hit
    r, c, rho = encoding_arrays(h, w, dtype=np.float64)
    xi = Tensor(np.stack([r, c])[None].astype(dtype))
    rho_t = Tensor(rho[None, None].astype(dtype))
    maps = EncodingMaps(xi=xi, rho=rho_t)
    with _cache_lock:
        _cache.setdefault(key, maps)
        return _cache[key]
