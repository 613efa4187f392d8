"""Synthetic small-motion scenes with exact ground truth, plus the two
benchmark protocols: convergence contrast between rank-1 and flat
initialization, and self-calibration accuracy via the pixel-grid distortion
metric.

Track mode samples points in the reference frustum and projects them through
ground-truth geometry; render mode synthesizes a textured two-plane scene
(a fronto-parallel background and a slanted foreground) so the full pipeline
including tracking and dense matching can run end to end.

Camera centers are drawn with their z component attenuated relative to the
in-plane components: burst-capture hand tremor is dominated by in-plane
translation, and in-plane motion is what gives the flow constraint matrix its
near rank-1 structure.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ba, rank1
from .errors import TooFewTracks
from .features import TrackTable
from .geometry import (
    CameraModel,
    Distortion,
    Intrinsics,
    Pose,
    distort,
    image_center,
    so3_exp,
    undistort,
)

FRUSTUM_MARGIN_PX = 24.0


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of a generated scene; ``n_frames`` counts non-reference frames."""

    n_frames: int = 10
    m_points: int = 300
    image_size: tuple[int, int] = (1280, 720)
    focal_true: float = 1280.0
    k1_true: float = -0.12
    k2_true: float = 0.03
    depth_range: tuple[float, float] = (1.0, 4.0)
    baseline_frac: float = 0.005
    rot_max_deg: float = 0.2
    noise_px: float = 0.3
    seed: int = 0
    render_images: bool = False
    t_z_scale: float = 0.05

    def __post_init__(self):
        # baseline_frac bounds the viewing angle (parallax) of the capture;
        # camera rotation does not affect the baseline and hand tremor reaches
        # a couple of degrees, so its cap is looser.
        if not 0.0 <= self.baseline_frac <= 0.02:
            raise ValueError("baseline_frac must lie in [0, 0.02]")
        if not 0.0 <= self.rot_max_deg <= 2.0:
            raise ValueError("rot_max_deg must lie in [0, 2.0]")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError("depth_range must be increasing and positive")

    def camera(self) -> CameraModel:
        intr = Intrinsics(
            self.focal_true, image_center(self.image_size), self.image_size
        )
        return CameraModel(intr, Distortion(self.k1_true, self.k2_true))


@dataclass(frozen=True)
class GroundTruth:
    """Exact scene parameters; render mode also carries the reference
    inverse-depth map (track-mode fields that do not apply stay None)."""

    camera: CameraModel
    poses: list[Pose]
    omegas: np.ndarray | None = None
    ref_inverse_depth: np.ndarray | None = None

    def state(self, gauge_point: int | None = None) -> ba.BAState:
        """Ground truth packed as a bundle-adjustment state (track mode only)."""
        if self.omegas is None:
            raise ValueError("no sparse ground truth for a rendered scene")
        g = ba.gauge_index(self.omegas) if gauge_point is None else gauge_point
        return ba.BAState(
            focal=self.camera.intrinsics.focal,
            k1=self.camera.distortion.k1,
            k2=self.camera.distortion.k2,
            poses=list(self.poses),
            omegas=self.omegas.copy(),
            gauge_point=g,
        )


def _sample_poses(cfg: SceneConfig, mean_depth: float, rng: np.random.Generator):
    """Rotations up to rot_max and centers up to baseline_frac * mean depth."""
    rot_max = np.deg2rad(cfg.rot_max_deg)
    poses = []
    centers = []
    for _ in range(cfg.n_frames):
        axis = rng.normal(size=3)
        axis /= max(np.linalg.norm(axis), 1e-12)
        theta = axis * rot_max * rng.uniform(0.7, 1.0)
        cdir = rng.normal(size=3) * np.array([1.0, 1.0, cfg.t_z_scale])
        cdir /= max(np.linalg.norm(cdir), 1e-12)
        c = cdir * cfg.baseline_frac * mean_depth * rng.uniform(0.5, 1.0)
        rot = so3_exp(theta)
        poses.append(Pose(rot, -rot.matrix @ c))
        centers.append(c)
    return poses, np.asarray(centers)


def generate(cfg: SceneConfig):
    """Build a scene; returns (TrackTable, GroundTruth) or, with
    ``render_images``, (frame list, GroundTruth)."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.render_images:
        return _render_scene(cfg, rng)
    cam = cfg.camera()
    intr, dist = cam.intrinsics, cam.distortion
    w, h = cfg.image_size
    mrg = FRUSTUM_MARGIN_PX
    ref_px = np.stack(
        [
            rng.uniform(mrg, w - 1 - mrg, cfg.m_points),
            rng.uniform(mrg, h - 1 - mrg, cfg.m_points),
        ],
        axis=1,
    )
    z = rng.uniform(cfg.depth_range[0], cfg.depth_range[1], cfg.m_points)
    rays = undistort((ref_px - intr.principal_point) / intr.focal, dist, tol=1e-12, max_iter=60)
    P = np.concatenate([rays, np.ones((cfg.m_points, 1))], axis=1) * z[:, None]
    poses, _ = _sample_poses(cfg, float(np.mean(z)), rng)

    obs = np.empty((cfg.n_frames, cfg.m_points, 2))
    in_front = np.ones(cfg.m_points, dtype=bool)
    for i, pose in enumerate(poses):
        X = P @ pose.rotation.matrix.T + pose.translation
        in_front &= X[:, 2] > 1e-9
        xu = X[:, :2] / X[:, 2:]
        obs[i] = distort(xu, dist) * intr.focal + intr.principal_point
    if cfg.noise_px > 0:
        obs = obs + rng.normal(0.0, cfg.noise_px, obs.shape)
    hi = np.array([w - 1.0, h - 1.0])
    inside = np.all((obs >= 0.0) & (obs <= hi), axis=(0, 2)) & in_front
    if int(inside.sum()) < 16:
        raise TooFewTracks(f"only {int(inside.sum())} points survive the frustum")
    table = TrackTable(ref_px[inside], obs[:, inside], cfg.image_size)
    truth = GroundTruth(camera=cam, poses=poses, omegas=1.0 / z[inside])
    return table, truth


class _WaveTexture:
    """Smooth band-limited texture: a fixed sum of random cosine waves.

    Frequencies are log-uniform over the band so every pyramid level of a
    coarse-to-fine tracker sees comparable energy.
    """

    def __init__(self, rng: np.random.Generator, freq_lo: float, freq_hi: float,
                 n_waves: int = 48):
        ang = rng.uniform(0, 2 * np.pi, n_waves)
        freq = np.exp(rng.uniform(np.log(freq_lo), np.log(freq_hi), n_waves))
        self.kx = np.cos(ang) * freq * 2 * np.pi
        self.ky = np.sin(ang) * freq * 2 * np.pi
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amp = rng.uniform(0.5, 1.0, n_waves)
        self.amp /= np.sum(self.amp)

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(u)
        for kx, ky, ph, a in zip(self.kx, self.ky, self.phase, self.amp):
            out += a * np.cos(kx * u + ky * v + ph)
        return 0.5 + 0.45 * out


def texture_image(width: int, height: int, seed: int = 0) -> np.ndarray:
    """Deterministic textured test image (wavelengths ~16..120 px)."""
    rng = np.random.default_rng(seed)
    tex = _WaveTexture(rng, 1.0 / 120.0, 1.0 / 16.0)
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    return np.clip(tex(us, vs), 0.0, 1.0)


def _render_scene(cfg: SceneConfig, rng: np.random.Generator):
    """Textured fronto-parallel background plus a slanted foreground slab."""
    cam = cfg.camera()
    intr, dist = cam.intrinsics, cam.distortion
    w, h = cfg.image_size
    z_lo, z_hi = cfg.depth_range
    z_bg = z_hi * 0.9
    z_fg = z_lo * 1.3
    slope = 0.9  # foreground plane: z = z_fg + slope * x
    box = (-0.30, 0.05, -0.22, 0.22)  # reference-normalized extent of the slab
    n_plane = np.array([-slope, 0.0, 1.0])
    e1 = np.array([1.0, 0.0, slope]) / np.hypot(1.0, slope)
    e2 = np.array([0.0, 1.0, 0.0])
    q0 = np.array([0.0, 0.0, z_fg])

    z_mid = 0.5 * (z_fg + z_bg)
    # wavelengths of roughly 8..64 px at each plane's depth: short waves give
    # the tracker sub-pixel precision, the long end keeps coarse pyramid
    # levels informative
    tex_bg = _WaveTexture(rng, intr.focal / (64.0 * z_bg), intr.focal / (8.0 * z_bg),
                          n_waves=64)
    tex_fg = _WaveTexture(rng, intr.focal / (64.0 * z_fg), intr.focal / (8.0 * z_fg),
                          n_waves=64)

    poses, _ = _sample_poses(cfg, z_mid, rng)
    all_poses = [Pose.identity()] + poses

    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    x_d = np.stack([(us - intr.principal_point[0]) / intr.focal,
                    (vs - intr.principal_point[1]) / intr.focal], axis=-1)
    rays_img = undistort(x_d, dist, tol=1e-12, max_iter=60)

    frames = []
    ref_inv = None
    for idx, pose in enumerate(all_poses):
        c = pose.center()
        v = np.concatenate([rays_img, np.ones((h, w, 1))], axis=-1)
        d = v @ pose.rotation.matrix  # rows R^T v: ray directions in reference coords
        dz = d[..., 2]
        s_bg = (z_bg - c[2]) / dz
        s_fg = (n_plane @ q0 - n_plane @ c) / (d @ n_plane)
        X_fg = c + s_fg[..., None] * d
        fx = X_fg[..., 0] / X_fg[..., 2]
        fy = X_fg[..., 1] / X_fg[..., 2]
        fg_ok = (s_fg > 0) & (fx >= box[0]) & (fx <= box[1]) & (fy >= box[2]) & (fy <= box[3])
        use_fg = fg_ok & (s_fg < s_bg)
        s = np.where(use_fg, s_fg, s_bg)
        X = c + s[..., None] * d
        val_bg = tex_bg(X[..., 0], X[..., 1])
        rel = X - q0
        val_fg = tex_fg(rel @ e1, rel @ e2)
        img = np.clip(np.where(use_fg, val_fg, val_bg), 0.0, 1.0)
        frames.append(img)
        if idx == 0:
            ref_inv = (1.0 / s).astype(np.float64)
    truth = GroundTruth(camera=cam, poses=poses, omegas=None, ref_inverse_depth=ref_inv)
    return frames, truth


def grid_distortion_error(
    est: CameraModel, truth: CameraModel, grid_step: int = 40
) -> float:
    """Mean pixel displacement of the estimated-undistort / true-distort
    round trip over a pixel grid, computed in the truth camera's normalized
    frame. Identical models give zero up to the undistortion tolerance."""
    if est.intrinsics.image_size != truth.intrinsics.image_size:
        raise ValueError("camera models must share one image size")
    w, h = truth.intrinsics.image_size
    f = truth.intrinsics.focal
    pp = truth.intrinsics.principal_point
    us, vs = np.meshgrid(
        np.arange(0, w, grid_step, dtype=np.float64),
        np.arange(0, h, grid_step, dtype=np.float64),
    )
    p = np.stack([us.ravel(), vs.ravel()], axis=1)
    x_d = (p - pp) / f
    q = undistort(x_d, est.distortion, tol=1e-12, max_iter=60)
    back = distort(q, truth.distortion) * f + pp
    return float(np.mean(np.linalg.norm(p - back, axis=1)))


def eval_focal(est, truth) -> float:
    """Relative focal error in percent; accepts states/models or raw values."""
    f_est = getattr(est, "focal", est)
    if hasattr(truth, "camera"):
        f_true = truth.camera.intrinsics.focal
    else:
        f_true = getattr(truth, "focal", truth)
    return abs(float(f_est) - float(f_true)) / float(f_true) * 100.0


def bench_convergence(
    cfg: SceneConfig,
    trials: int,
    opts: ba.BAOptions | None = None,
    grid_step: int = 40,
) -> list[dict]:
    """Run the sparse pipeline from rank-1 and flat starts on seeded scenes.

    Emits one record per (trial, init mode) with the solver report, the focal
    error and the pixel-grid distortion error; per-trial failures are recorded
    rather than raised.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    opts = opts or ba.BAOptions()
    records = []
    for trial in range(trials):
        scene = replace(cfg, seed=cfg.seed + trial, render_images=False)
        table, truth = generate(scene)
        intr0 = Intrinsics.initial_for(scene.image_size)
        for mode in ("rank1", "flat"):
            rec = {"seed": scene.seed, "init_mode": mode}
            try:
                state0 = rank1.initial_state(table, intr0, mode=mode)
                est, report = ba.solve(state0, table, opts)
                est_cam = CameraModel(
                    Intrinsics(est.focal, intr0.principal_point, scene.image_size),
                    Distortion(est.k1, est.k2),
                )
                rec.update(
                    iterations=report.iterations,
                    converged=report.converged,
                    initial_cost=report.initial_cost,
                    final_cost=report.final_cost,
                    focal_error_pct=eval_focal(est, truth),
                    grid_error_px=grid_distortion_error(
                        est_cam, truth.camera, grid_step
                    ),
                    cost_trace=list(report.cost_trace),
                )
            except Exception as exc:  # recorded, not fatal
                rec["error"] = type(exc).__name__
            records.append(rec)
    return records
