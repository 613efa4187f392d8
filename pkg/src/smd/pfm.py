"""PFM float-image reader and writer (grayscale "Pf" variant).

The format stores rows bottom-up; a negative scale header marks little-endian
data. Inverse-depth maps round-trip bit-exactly since both sides are float32.
"""

from __future__ import annotations

import numpy as np

from .errors import DecodeError


def write_pfm(path, data: np.ndarray, scale: float = -1.0) -> None:
    """Write a (H, W) float32 array; ``scale`` < 0 selects little-endian."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {data.shape}")
    if scale == 0:
        raise ValueError("scale must be nonzero")
    h, w = data.shape
    raster = data[::-1]  # bottom-up
    raster = raster.astype("<f4" if scale < 0 else ">f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{scale:.1f}\n".encode("ascii"))
        f.write(raster.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a (H, W) float32 array (top-down rows)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise DecodeError(f"{path}: not a grayscale PFM file")
        try:
            w, h = (int(t) for t in f.readline().split())
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise DecodeError(f"{path}: malformed PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise DecodeError(f"{path}: truncated PFM raster")
        data = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)
