"""Binary tensor dump format ("RTNS") and PGM image export.

RTNS layout: magic bytes ``RTNS``, u32 LE version (=1), u32 LE ndim,
ndim u32 LE dims, then row-major 32-bit IEEE-754 LE payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RTNS"
VERSION = 1


def write_rtns(path, array):
    # ascontiguousarray would promote 0-d arrays to 1-d, losing the shape.
    arr = np.asarray(array, dtype="<f4")
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.tobytes())


def read_rtns(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported RTNS version {version}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    payload = raw[12 + 4 * ndim :]
    count = int(np.prod(dims)) if ndim else 1
    if len(payload) != 4 * count:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_pgm(path, array):
    """Write a 2-d array as binary PGM, linearly rescaled to 0..255."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM export needs a 2-d array, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = (arr - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(arr)
    pix = np.round(scaled).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        f.write(pix.tobytes())
