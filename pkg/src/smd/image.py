"""Grayscale image helpers shared by feature tracking and dense matching.

Images are plain 2D float64 arrays with intensities in [0, 1], row-major
(height, width). Smoothing uses the 5-tap binomial kernel with reflect
borders; gradients are 3-tap central differences with replicated edges.
"""

from __future__ import annotations

import numpy as np

from .errors import SizeMismatch

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def check_gray_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate and return a (H, W) float64 image with values in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return a


def check_same_size(images: list[np.ndarray]) -> None:
    shape = images[0].shape
    for i, im in enumerate(images[1:], start=1):
        if im.shape != shape:
            raise SizeMismatch(f"frame {i} has shape {im.shape}, expected {shape}")


def _conv1d(img: np.ndarray, kernel: np.ndarray, axis: int, mode: str) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode=mode)
    out = np.zeros_like(img)
    for k, w in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(k, k + img.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def binomial5(img: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial smoothing."""
    return _conv1d(_conv1d(img, _BINOMIAL5, 0, "reflect"), _BINOMIAL5, 1, "reflect")


def gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients (gx along width, gy along height)."""
    k = np.array([-0.5, 0.0, 0.5])  # _conv1d correlates, no kernel flip
    gx = _conv1d(img, k, 1, "edge")
    gy = _conv1d(img, k, 0, "edge")
    return gx, gy


def box_sum(img: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window via an integral image, edge-replicated."""
    r = radius
    padded = np.pad(img, r, mode="edge")
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1))
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=ii[1:, 1:])
    w = 2 * r + 1
    h, wid = img.shape
    return ii[w : w + h, w : w + wid] - ii[0:h, w : w + wid] - ii[w : w + h, 0:wid] + ii[0:h, 0:wid]


def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample at float coordinates; caller guarantees 0 <= x <= W-1, 0 <= y <= H-1."""
    h, w = img.shape
    x0 = np.clip(np.floor(x).astype(np.intp), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.intp), 0, h - 2)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def decimate2(img: np.ndarray) -> np.ndarray:
    """Binomial anti-aliasing followed by 2x decimation."""
    return binomial5(img)[::2, ::2]


def pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level 0 is the input; each next level is decimate2 of the previous."""
    out = [img]
    for _ in range(levels - 1):
        out.append(decimate2(out[-1]))
    return out


def block_average(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downscale by an integer factor (crops to a multiple)."""
    if factor == 1:
        return img
    h, w = img.shape
    hh, ww = (h // factor) * factor, (w // factor) * factor
    a = img[:hh, :ww].reshape(hh // factor, factor, ww // factor, factor)
    return a.mean(axis=(1, 3))
