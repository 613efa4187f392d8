"""Dense depth from plane-sweep photoconsistency.

Inverse-depth planes are sampled uniformly, every reference pixel is
back-projected onto each plane and re-projected into all non-reference frames
(with the refined intrinsics, distortion and poses), and the matching cost is
the intensity variance of the sample set including the reference pixel.
Winner-take-all selection and a median filter produce the final depth map.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ba import BAState
from .errors import BadRange
from .geometry import Distortion, image_center, undistort_with_status
from .image import bilinear, block_average, check_gray_image

MIN_SAMPLES = 3  # reference + 2 frames


@dataclass(frozen=True)
class CostVolume:
    cost: np.ndarray  # (n_planes, H, W) float32, variance where valid
    valid: np.ndarray  # (n_planes, H, W) bool

    @property
    def n_planes(self) -> int:
        return self.cost.shape[0]

    @property
    def height(self) -> int:
        return self.cost.shape[1]

    @property
    def width(self) -> int:
        return self.cost.shape[2]


@dataclass(frozen=True)
class DepthMap:
    inverse_depth: np.ndarray  # (H, W) float32, 0 where invalid
    valid: np.ndarray  # (H, W) bool
    confidence: np.ndarray  # (H, W) float32 in [0, 1]

    @property
    def height(self) -> int:
        return self.inverse_depth.shape[0]

    @property
    def width(self) -> int:
        return self.inverse_depth.shape[1]


def sample_planes(omega_min: float, omega_max: float, n: int) -> np.ndarray:
    """Uniform inverse-depth samples with endpoints; n = 1 gives the midpoint."""
    if not (0 < omega_min < omega_max):
        raise BadRange(f"need 0 < omega_min < omega_max, got {omega_min}, {omega_max}")
    if n < 1:
        raise BadRange("need at least one plane")
    if n == 1:
        return np.array([(omega_min + omega_max) / 2.0])
    return np.linspace(omega_min, omega_max, n)


def _scaled_center(pp: np.ndarray, factor: int) -> np.ndarray:
    # pixel-center convention: full-res coordinate u maps to (u + 0.5)/s - 0.5
    return (pp + 0.5) / factor - 0.5


def sweep(
    ref: np.ndarray,
    frames: list[np.ndarray],
    state: BAState,
    planes: np.ndarray,
    downscale: int = 1,
    threads: int = 1,
) -> CostVolume:
    """Photoconsistency cost volume over the sampled inverse-depth planes.

    ``frames`` are the non-reference images in pose order. Samples that fall
    outside a frame are dropped; an entry is valid when at least three
    intensities (reference plus two) contribute.
    """
    ref = check_gray_image(ref, "ref")
    frames = [check_gray_image(f, f"frame {i}") for i, f in enumerate(frames)]
    if len(frames) != state.n_frames:
        raise ValueError(f"{len(frames)} frames for {state.n_frames} poses")
    if downscale < 1:
        raise ValueError("downscale must be >= 1")
    full_h, full_w = ref.shape
    pp_full = image_center((full_w, full_h))
    f = state.focal / downscale
    pp = _scaled_center(pp_full, downscale)
    ref_s = block_average(ref, downscale)
    frames_s = [block_average(im, downscale) for im in frames]
    h, w = ref_s.shape
    dist = Distortion(state.k1, state.k2)

    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    x_d = np.stack([(us - pp[0]) / f, (vs - pp[1]) / f], axis=-1)
    rays, ray_ok = undistort_with_status(x_d, dist, tol=1e-10, max_iter=30)
    Rm = np.stack([p.rotation.matrix for p in state.poses])
    ts = np.stack([p.translation for p in state.poses])
    ref_val = ref_s

    planes = np.asarray(planes, dtype=np.float64)

    def one_plane(omega: float):
        P = np.concatenate([rays, np.ones((h, w, 1))], axis=-1) / omega
        cnt = ray_ok.astype(np.float64)
        ssum = np.where(ray_ok, ref_val, 0.0)
        ssq = np.where(ray_ok, ref_val * ref_val, 0.0)
        for i in range(len(frames_s)):
            X = P @ Rm[i].T + ts[i]
            z = X[..., 2]
            zok = z > 1e-9
            zsafe = np.where(zok, z, 1.0)
            xu = X[..., :2] / zsafe[..., None]
            xd = xu * (1.0 + dist.k1 * np.sum(xu * xu, axis=-1, keepdims=True)
                       + dist.k2 * np.sum(xu * xu, axis=-1, keepdims=True) ** 2)
            px = xd[..., 0] * f + pp[0]
            py = xd[..., 1] * f + pp[1]
            inside = zok & (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
            val = bilinear(frames_s[i], np.where(inside, px, 0.0), np.where(inside, py, 0.0))
            cnt += inside
            ssum += np.where(inside, val, 0.0)
            ssq += np.where(inside, val * val, 0.0)
        good = cnt >= MIN_SAMPLES
        cnt_safe = np.maximum(cnt, 1.0)
        mean = ssum / cnt_safe
        var = np.maximum(ssq / cnt_safe - mean * mean, 0.0)
        return var.astype(np.float32), good & ray_ok

    if threads > 1 and len(planes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one_plane, planes))
    else:
        results = [one_plane(om) for om in planes]
    cost = np.stack([r[0] for r in results])
    valid = np.stack([r[1] for r in results])
    return CostVolume(cost, valid)


def winner_take_all(volume: CostVolume, planes: np.ndarray) -> DepthMap:
    """Per-pixel argmin over valid planes; ties go to the lowest plane index.

    Confidence is 1 - c_min / c_second over the valid planes, zero whenever
    fewer than two planes are valid at the pixel.
    """
    planes = np.asarray(planes, dtype=np.float64)
    if planes.shape[0] != volume.n_planes:
        raise ValueError(f"{planes.shape[0]} planes for volume of {volume.n_planes}")
    c = np.where(volume.valid, volume.cost.astype(np.float64), np.inf)
    idx = np.argmin(c, axis=0)
    cmin = np.take_along_axis(c, idx[None], axis=0)[0]
    c2 = c.copy()
    np.put_along_axis(c2, idx[None], np.inf, axis=0)
    csecond = np.min(c2, axis=0)
    n_valid = volume.valid.sum(axis=0)
    valid = n_valid >= 1
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.where(
            (n_valid >= 2) & (csecond > 0) & np.isfinite(csecond),
            1.0 - cmin / csecond,
            0.0,
        )
    conf = np.clip(np.nan_to_num(conf, nan=0.0), 0.0, 1.0)
    inv = np.where(valid, planes[idx], 0.0)
    return DepthMap(
        inv.astype(np.float32), valid, conf.astype(np.float32)
    )


def median_refine(dmap: DepthMap, radius: int = 2) -> DepthMap:
    """Window median of valid inverse depths; fills invalid pixels when at
    least half of the (truncated) window is valid. Borders use the in-image
    part of the window."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    h, w = dmap.inverse_depth.shape
    vals = np.where(dmap.valid, dmap.inverse_depth.astype(np.float64), np.nan)
    side = 2 * radius + 1
    stack = np.full((side * side, h, w), np.nan)
    in_image = np.zeros((side * side, h, w), dtype=bool)
    k = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys = slice(max(0, dy), h + min(0, dy))
            xs = slice(max(0, dx), w + min(0, dx))
            ys_src = slice(max(0, -dy), h + min(0, -dy))
            xs_src = slice(max(0, -dx), w + min(0, -dx))
            stack[k][ys_src, xs_src] = vals[ys, xs]
            in_image[k][ys_src, xs_src] = True
            k += 1
    n_valid = np.sum(np.isfinite(stack), axis=0)
    window_size = in_image.sum(axis=0)
    with np.errstate(all="ignore"):
        med = np.nanmedian(stack, axis=0)
    fill = (~dmap.valid) & (n_valid >= 0.5 * window_size) & (n_valid >= 1)
    out_valid = dmap.valid | fill
    keep = dmap.valid & (n_valid >= 1)
    inv = np.zeros((h, w))
    inv[keep] = med[keep]
    inv[fill] = med[fill]
    conf = np.where(dmap.valid, dmap.confidence, 0.0)
    return DepthMap(inv.astype(np.float32), out_valid, conf.astype(np.float32))
