"""End-to-end orchestration: frame loading, tracking, initialization, bundle
adjustment, plane sweep and output files.

The stage sequence is read -> features -> init -> ba -> sweep; per-stage wall
times are recorded in the run report. Outputs are ``depth.pfm`` (inverse
depth, 0 marks invalid pixels), ``depth_preview.png`` and ``report.json``.
"""

from __future__ import annotations

import dataclasses
import glob
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import ba, features, plane_sweep, rank1
from .errors import (
    DecodeError,
    SizeMismatch,
    SmallMotionError,
    StageError,
    TooFewFrames,
)
from .geometry import Intrinsics, image_center
from .pfm import write_pfm

STAGES = ("read", "features", "init", "ba", "sweep")
_LUMA = np.array([0.299, 0.587, 0.114])  # BT.601

# viridis anchors, linearly interpolated for the preview colormap
_VIRIDIS = np.array(
    [
        (0.267004, 0.004874, 0.329415),
        (0.282623, 0.140926, 0.457517),
        (0.253935, 0.265254, 0.529983),
        (0.206756, 0.371758, 0.553117),
        (0.163625, 0.471133, 0.558148),
        (0.127568, 0.566949, 0.550556),
        (0.134692, 0.658636, 0.517649),
        (0.266941, 0.748751, 0.440573),
        (0.477504, 0.821444, 0.318195),
        (0.741388, 0.873449, 0.149561),
        (0.993248, 0.906157, 0.143936),
    ]
)


@dataclass
class PipelineConfig:
    input: str | None = None
    output_dir: str = "out"
    grid_size: int = 80
    n_planes: int = 128
    sweep_downscale: int = 2
    init_mode: str = "rank1"
    seed: int = 0
    threads: int = 0  # 0 = auto
    levels: int = 3
    window_radius: int = 10
    ba_options: ba.BAOptions = field(default_factory=ba.BAOptions)

    def tracking_params(self) -> features.TrackingParams:
        return features.TrackingParams(
            grid_size=self.grid_size,
            window_radius=self.window_radius,
            levels=self.levels,
        )


@dataclass
class RunReport:
    timings: dict = field(default_factory=dict)
    feature_count: int = 0
    ba: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    error: dict | None = None

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)


def _decode_file(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I"):
                arr = np.asarray(im, dtype=np.float64)
                arr = arr / max(float(arr.max()), 1.0)
            else:
                rgb = im.convert("RGB")
                arr = np.asarray(rgb, dtype=np.float64) / 255.0
                arr = arr @ _LUMA
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return np.clip(arr, 0.0, 1.0)


def load_frames(pattern: str) -> list[np.ndarray]:
    """Decode all files matching the pattern, in lexicographic order.

    The first file is the reference frame. PNG and PGM inputs are accepted;
    RGB content is converted with BT.601 luma weights.
    """
    paths = sorted(glob.glob(pattern))
    if len(paths) < 2:
        raise TooFewFrames(f"{len(paths)} file(s) match {pattern!r}, need at least 2")
    frames = [_decode_file(p) for p in paths]
    shape = frames[0].shape
    for p, fr in zip(paths[1:], frames[1:]):
        if fr.shape != shape:
            raise SizeMismatch(
                f"{p}: size {fr.shape[::-1]} differs from first frame {shape[::-1]}"
            )
    return frames


def _preview_png(path: str, dmap: plane_sweep.DepthMap) -> None:
    inv = dmap.inverse_depth.astype(np.float64)
    valid = dmap.valid
    rgb = np.zeros(inv.shape + (3,), dtype=np.uint8)
    if np.any(valid):
        lo, hi = float(inv[valid].min()), float(inv[valid].max())
        t = (inv - lo) / (hi - lo) if hi > lo else np.full_like(inv, 0.5)
        t = np.clip(t, 0.0, 1.0) * (len(_VIRIDIS) - 1)
        i0 = np.clip(t.astype(int), 0, len(_VIRIDIS) - 2)
        frac = (t - i0)[..., None]
        col = _VIRIDIS[i0] * (1 - frac) + _VIRIDIS[i0 + 1] * frac
        rgb = np.where(valid[..., None], (col * 255).round(), 0).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def run(cfg: PipelineConfig, frames: list[np.ndarray] | None = None) -> RunReport:
    """Execute the full pipeline and write outputs into cfg.output_dir.

    ``frames`` may be passed directly (the synthetic path does); otherwise
    they are loaded from ``cfg.input``. On a stage failure the report is
    still written, carrying the stage name and cause, and a StageError is
    raised.
    """
    report = RunReport()
    report.config = {
        "input": cfg.input,
        "grid_size": cfg.grid_size,
        "n_planes": cfg.n_planes,
        "sweep_downscale": cfg.sweep_downscale,
        "init_mode": cfg.init_mode,
        "seed": cfg.seed,
        "levels": cfg.levels,
        "window_radius": cfg.window_radius,
    }
    os.makedirs(cfg.output_dir, exist_ok=True)
    threads = cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)
    t_start = time.perf_counter()
    stage = "read"
    try:
        t0 = time.perf_counter()
        if frames is None:
            if cfg.input is None:
                raise TooFewFrames("no input pattern and no frames given")
            frames = load_frames(cfg.input)
        report.timings["read"] = time.perf_counter() - t0

        stage = "features"
        t0 = time.perf_counter()
        table = features.build_tracks(frames, 0, cfg.tracking_params(), threads=threads)
        report.feature_count = table.m_points
        report.timings["features"] = time.perf_counter() - t0

        stage = "init"
        t0 = time.perf_counter()
        intr = Intrinsics.initial_for(table.image_size)
        state0 = rank1.initial_state(table, intr, mode=cfg.init_mode)
        report.timings["init"] = time.perf_counter() - t0

        stage = "ba"
        t0 = time.perf_counter()
        state, ba_report = ba.solve(state0, table, cfg.ba_options)
        report.ba = {
            "iterations": ba_report.iterations,
            "converged": ba_report.converged,
            "initial_cost": ba_report.initial_cost,
            "final_cost": ba_report.final_cost,
        }
        report.calibration = {
            "focal": state.focal,
            "k1": state.k1,
            "k2": state.k2,
            "principal_point": list(image_center(table.image_size)),
        }
        report.timings["ba"] = time.perf_counter() - t0

        stage = "sweep"
        t0 = time.perf_counter()
        planes = plane_sweep.sample_planes(
            0.9 * float(state.omegas.min()), 1.1 * float(state.omegas.max()), cfg.n_planes
        )
        volume = plane_sweep.sweep(
            frames[0], frames[1:], state, planes,
            downscale=cfg.sweep_downscale, threads=threads,
        )
        dmap = plane_sweep.median_refine(
            plane_sweep.winner_take_all(volume, planes), radius=2
        )
        report.timings["sweep"] = time.perf_counter() - t0

        depth_path = os.path.join(cfg.output_dir, "depth.pfm")
        preview_path = os.path.join(cfg.output_dir, "depth_preview.png")
        write_pfm(depth_path, dmap.inverse_depth)
        _preview_png(preview_path, dmap)
        report.outputs = {
            "depth_pfm": "depth.pfm",
            "depth_preview_png": "depth_preview.png",
            "report_json": "report.json",
        }
        report.timings["total"] = time.perf_counter() - t_start
        _write_report(cfg, report)
        return report
    except SmallMotionError as exc:
        report.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
        report.timings["total"] = time.perf_counter() - t_start
        _write_report(cfg, report)
        raise StageError(stage, exc) from exc


def _write_report(cfg: PipelineConfig, report: RunReport) -> None:
    with open(os.path.join(cfg.output_dir, "report.json"), "w") as f:
        f.write(report.to_json())
        f.write("\n")
