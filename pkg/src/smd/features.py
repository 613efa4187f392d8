"""Grid-constrained corner extraction and pyramidal translational tracking.

Corners are scored on the reference frame with the Shi-Tomasi minimum
eigenvalue of the windowed gradient structure tensor, thinned to at most one
per fixed-size grid cell, then tracked independently from the reference into
every other frame with a coarse-to-fine translational Lucas-Kanade solver.
Only tracks that survive in every frame are kept.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ImageTooSmall, SizeMismatch, TooFewTracks
from .image import (
    bilinear,
    binomial5,
    box_sum,
    check_gray_image,
    check_same_size,
    gradients,
    pyramid,
)

MIN_TRACKS = 16


@dataclass(frozen=True)
class TrackingParams:
    grid_size: int = 80
    window_radius: int = 10
    levels: int = 3
    max_iter: int = 30
    eps: float = 0.01  # px, per-level step tolerance
    min_response: float = 1e-4
    fb_tol: float | None = 0.3  # px; None disables the forward-backward check


@dataclass(frozen=True)
class TrackTable:
    """Dense table of m tracks over n non-reference frames.

    ``ref_points`` holds the (m, 2) distorted pixel positions on the
    reference frame; ``obs[i, j]`` is track j observed in non-reference
    frame i. Every cell is populated.
    """

    ref_points: np.ndarray  # (m, 2)
    obs: np.ndarray  # (n, m, 2)
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        ref = np.asarray(self.ref_points, dtype=np.float64)
        obs = np.asarray(self.obs, dtype=np.float64)
        if ref.ndim != 2 or ref.shape[1] != 2:
            raise ValueError(f"ref_points must be (m, 2), got {ref.shape}")
        if obs.ndim != 3 or obs.shape[1:] != ref.shape:
            raise ValueError(f"obs must be (n, m, 2), got {obs.shape}")
        if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(obs))):
            raise ValueError("track coordinates must be finite")
        w, h = self.image_size
        hi = np.array([w - 1.0, h - 1.0])
        for name, a in (("ref_points", ref), ("obs", obs)):
            if np.any(a < 0) or np.any(a > hi):
                raise ValueError(f"{name} outside image bounds {w}x{h}")
        if ref.shape[0] < MIN_TRACKS:
            raise TooFewTracks(f"{ref.shape[0]} tracks < minimum {MIN_TRACKS}")
        object.__setattr__(self, "ref_points", ref)
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "image_size", (int(w), int(h)))

    @property
    def n_frames(self) -> int:
        return self.obs.shape[0]

    @property
    def m_points(self) -> int:
        return self.ref_points.shape[0]


def shi_tomasi_response(img: np.ndarray, window_radius: int) -> np.ndarray:
    """Minimum eigenvalue of the structure tensor summed over the window.

    The border band of width ``window_radius + 1`` is zeroed; the image is
    binomial-smoothed before gradients are taken.
    """
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    img = check_gray_image(img)
    h, w = img.shape
    side = 2 * window_radius + 1
    if h < side or w < side:
        raise ImageTooSmall(f"image {w}x{h} smaller than window {side}x{side}")
    gx, gy = gradients(binomial5(img))
    sxx = box_sum(gx * gx, window_radius)
    syy = box_sum(gy * gy, window_radius)
    sxy = box_sum(gx * gy, window_radius)
    # min eigenvalue of [[sxx, sxy], [sxy, syy]]
    tr = sxx + syy
    disc = np.sqrt(np.maximum((sxx - syy) ** 2 + 4.0 * sxy * sxy, 0.0))
    resp = 0.5 * (tr - disc)
    resp = np.maximum(resp, 0.0)
    b = window_radius + 1
    resp[:b, :] = 0.0
    resp[-b:, :] = 0.0
    resp[:, :b] = 0.0
    resp[:, -b:] = 0.0
    return resp


def grid_extract(
    response: np.ndarray, grid_size: int, min_response: float
) -> np.ndarray:
    """At most one corner per grid cell: the per-cell response argmax.

    Ties break to the smallest row-major pixel index. Returns an (m, 2)
    array of (u, v) pixel coordinates, row-major cell order.
    """
    if grid_size < 8:
        raise ValueError("grid_size must be >= 8")
    h, w = response.shape
    feats = []
    for cy in range(0, h, grid_size):
        for cx in range(0, w, grid_size):
            block = response[cy : cy + grid_size, cx : cx + grid_size]
            k = int(np.argmax(block))  # first max = smallest row-major index
            if block.flat[k] >= min_response:
                bw = block.shape[1]
                feats.append((cx + k % bw, cy + k // bw))
    if not feats:
        return np.zeros((0, 2), dtype=np.float64)
    return np.asarray(feats, dtype=np.float64)


def threshold_extract(response: np.ndarray, min_response: float) -> np.ndarray:
    """Ungridded baseline: 3x3 local maxima at or above the threshold."""
    r = response
    interior = r[1:-1, 1:-1]
    mask = interior >= min_response
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            mask &= interior > r[1 + dy : r.shape[0] - 1 + dy, 1 + dx : r.shape[1] - 1 + dx]
    vs, us = np.nonzero(mask)
    return np.stack([us + 1, vs + 1], axis=1).astype(np.float64)


def _track_one(
    ref_levels: list[np.ndarray],
    grad_levels: list[tuple[np.ndarray, np.ndarray]],
    tgt_levels: list[np.ndarray],
    pt: np.ndarray,
    window_radius: int,
    max_iter: int,
    eps: float,
) -> tuple[np.ndarray, bool]:
    w = window_radius
    off = np.arange(-w, w + 1, dtype=np.float64)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    d = np.zeros(2)
    n_levels = len(ref_levels)
    for level in range(n_levels - 1, -1, -1):
        scale = 2.0**level
        img = ref_levels[level]
        tgt = tgt_levels[level]
        gx_img, gy_img = grad_levels[level]
        h, wid = img.shape
        if level < n_levels - 1:
            d = d * 2.0
        px = pt[0] / scale + ox
        py = pt[1] / scale + oy

        def outside(x, y):
            return x.min() < 0 or y.min() < 0 or x.max() > wid - 1 or y.max() > h - 1

        if outside(px, py):
            if level == 0:
                return pt + d, False
            continue  # coarse levels only accelerate; carry d down
        patch = bilinear(img, px, py)
        gx = bilinear(gx_img, px, py)
        gy = bilinear(gy_img, px, py)
        g11 = np.sum(gx * gx)
        g12 = np.sum(gx * gy)
        g22 = np.sum(gy * gy)
        tr = g11 + g22
        det = g11 * g22 - g12 * g12
        min_eig = 0.5 * (tr - np.sqrt(max(tr * tr - 4.0 * det, 0.0)))
        if min_eig < 1e-6:
            if level == 0:
                return pt + d, False
            continue
        for _ in range(max_iter):
            qx = px + d[0]
            qy = py + d[1]
            if outside(qx, qy):
                if level == 0:
                    return pt + d, False
                break
            err = patch - bilinear(tgt, qx, qy)
            b1 = np.sum(gx * err)
            b2 = np.sum(gy * err)
            # 2x2 solve
            step = np.array([(g22 * b1 - g12 * b2) / det, (g11 * b2 - g12 * b1) / det])
            d = d + step
            if np.hypot(step[0], step[1]) < eps:
                break
        if level == 0:
            qx = px + d[0]
            qy = py + d[1]
            if outside(qx, qy):
                return pt + d, False
            resid = patch - bilinear(tgt, qx, qy)
            if np.mean(resid * resid) > 0.05:
                return pt + d, False
    return pt + d, True


def klt_track_pair(
    ref: np.ndarray,
    tgt: np.ndarray,
    pts: np.ndarray,
    levels: int = 3,
    window_radius: int = 10,
    max_iter: int = 30,
    eps: float = 0.01,
) -> tuple[np.ndarray, np.ndarray]:
    """Track points from ``ref`` into ``tgt``; returns (positions, ok mask).

    Coarse-to-fine translational Lucas-Kanade on the SSD of a (2w+1)^2 patch.
    A track fails when its patch leaves either image, the 2x2 normal matrix
    has minimum eigenvalue below 1e-6, or the final per-pixel SSD exceeds 0.05.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    ref = check_gray_image(ref, "ref")
    tgt = check_gray_image(tgt, "tgt")
    if ref.shape != tgt.shape:
        raise SizeMismatch(f"ref {ref.shape} vs tgt {tgt.shape}")
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    ref_levels = pyramid(ref, levels)
    tgt_levels = pyramid(tgt, levels)
    grad_levels = [gradients(im) for im in ref_levels]
    out = np.empty_like(pts)
    ok = np.empty(pts.shape[0], dtype=bool)
    for j, pt in enumerate(pts):
        out[j], ok[j] = _track_one(
            ref_levels, grad_levels, tgt_levels, pt, window_radius, max_iter, eps
        )
    return out, ok


def build_tracks(
    frames: list[np.ndarray],
    ref_index: int = 0,
    params: TrackingParams | None = None,
    threads: int = 1,
) -> TrackTable:
    """Extract grid corners on the reference frame and track into all others.

    Each track is verified by re-tracking it back to the reference; tracks
    whose round trip misses by more than ``fb_tol`` are marked failed (this
    rejects points straddling occlusion boundaries, whose patches mix two
    surfaces). Any point that fails in any frame is dropped; raises
    TooFewTracks when fewer than 16 survive.
    """
    if len(frames) < 2:
        raise SizeMismatch("need at least 2 frames")
    p = params or TrackingParams()
    frames = [check_gray_image(f, f"frame {i}") for i, f in enumerate(frames)]
    check_same_size(frames)
    ref = frames[ref_index]
    response = shi_tomasi_response(ref, p.window_radius)
    pts = grid_extract(response, p.grid_size, p.min_response)
    if pts.shape[0] < MIN_TRACKS:
        raise TooFewTracks(f"only {pts.shape[0]} corners extracted")
    targets = [f for i, f in enumerate(frames) if i != ref_index]

    def track(tgt):
        fwd, ok = klt_track_pair(
            ref, tgt, pts,
            levels=p.levels, window_radius=p.window_radius,
            max_iter=p.max_iter, eps=p.eps,
        )
        if p.fb_tol is not None:
            back, ok_b = klt_track_pair(
                tgt, ref, fwd,
                levels=p.levels, window_radius=p.window_radius,
                max_iter=p.max_iter, eps=p.eps,
            )
            gap = np.linalg.norm(back - pts, axis=1)
            ok = ok & ok_b & (gap <= p.fb_tol)
        return fwd, ok

    if threads > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(track, targets))
    else:
        results = [track(t) for t in targets]
    obs = np.stack([r[0] for r in results])
    keep = np.logical_and.reduce([r[1] for r in results])
    if int(keep.sum()) < MIN_TRACKS:
        raise TooFewTracks(f"only {int(keep.sum())} tracks survived all frames")
    h, w = ref.shape
    return TrackTable(pts[keep], obs[:, keep], (w, h))
