"""Command-line interface.

Four verbs cover the workflows: ``run`` executes the pipeline on a frame
directory, ``synth`` renders a synthetic scene and runs the pipeline on it,
``bench`` emits the rank-1 vs flat convergence table, and ``calib-eval``
scores a calibration against a reference with the pixel-grid metric.

Exit codes: 0 success, 2 input error, 3 degenerate motion, 4 solver failure.
The SMD_SEED environment variable overrides any configured seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
from PIL import Image

from . import ba, synth
from .errors import (
    BadRange,
    DecodeError,
    Degenerate,
    DegenerateMotion,
    NonConvergent,
    NumericalFailure,
    SizeMismatch,
    SmallMotionError,
    StageError,
    TooFewFrames,
    TooFewTracks,
)
from .geometry import CameraModel, Distortion, Intrinsics, image_center
from .pfm import write_pfm
from .pipeline import PipelineConfig, run

_INPUT_ERRORS = (DecodeError, SizeMismatch, TooFewFrames, TooFewTracks, BadRange)
_DEGENERATE_ERRORS = (DegenerateMotion, Degenerate)
_SOLVER_ERRORS = (NumericalFailure, NonConvergent)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, _INPUT_ERRORS):
        return 2
    if isinstance(exc, _DEGENERATE_ERRORS):
        return 3
    if isinstance(exc, _SOLVER_ERRORS):
        return 4
    return 1


def _read_config_file(path: str) -> dict:
    """Flat key = value file; keys use the same kebab-case names as flags."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (t.strip() for t in line.split("=", 1))
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value
    return out


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Config-file values fill in flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return
    values = _read_config_file(args.config)
    for key, value in values.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            parser.error(f"unknown config key {key!r}")
        if parser.get_default(attr) == getattr(args, attr):
            setattr(args, attr, value)


def _seed_override(seed: int) -> int:
    env = os.environ.get("SMD_SEED")
    return int(env) if env else seed


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    return PipelineConfig(
        input=getattr(args, "input", None),
        output_dir=args.output_dir,
        grid_size=args.grid_size,
        n_planes=args.n_planes,
        sweep_downscale=args.sweep_downscale,
        init_mode=args.init_mode,
        seed=_seed_override(args.seed),
        threads=args.threads,
        levels=args.levels,
        window_radius=args.window_radius,
        ba_options=ba.BAOptions(max_iter=args.ba_max_iter, ftol=args.ba_ftol),
    )


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output-dir", default="out")
    p.add_argument("--grid-size", type=int, default=80)
    p.add_argument("--n-planes", type=int, default=128)
    p.add_argument("--sweep-downscale", type=int, default=2)
    p.add_argument("--init-mode", choices=("rank1", "flat"), default="rank1")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--window-radius", type=int, default=10)
    p.add_argument("--ba-max-iter", type=int, default=100)
    p.add_argument("--ba-ftol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0, help="0 = auto")
    p.add_argument("--config", help="key = value file; flags win")


def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-frames", type=int, default=10)
    p.add_argument("--m-points", type=int, default=300)
    p.add_argument("--width", type=int, default=1280)
    p.add_argument("--height", type=int, default=720)
    p.add_argument("--focal-true", type=float, default=1280.0)
    p.add_argument("--k1-true", type=float, default=-0.12)
    p.add_argument("--k2-true", type=float, default=0.03)
    p.add_argument("--depth-min", type=float, default=1.0)
    p.add_argument("--depth-max", type=float, default=4.0)
    p.add_argument("--baseline-frac", type=float, default=0.005)
    p.add_argument("--rot-max-deg", type=float, default=0.2)
    p.add_argument("--noise-px", type=float, default=0.3)


def _scene_config(args: argparse.Namespace, render: bool) -> synth.SceneConfig:
    return synth.SceneConfig(
        n_frames=args.n_frames,
        m_points=args.m_points,
        image_size=(args.width, args.height),
        focal_true=args.focal_true,
        k1_true=args.k1_true,
        k2_true=args.k2_true,
        depth_range=(args.depth_min, args.depth_max),
        baseline_frac=args.baseline_frac,
        rot_max_deg=args.rot_max_deg,
        noise_px=args.noise_px,
        seed=_seed_override(args.seed),
        render_images=render,
    )


def _cmd_run(args, parser) -> int:
    cfg = _pipeline_config(args)
    report = run(cfg)
    print(json.dumps({"output_dir": cfg.output_dir, "features": report.feature_count,
                      "ba_iterations": report.ba["iterations"],
                      "converged": report.ba["converged"]}))
    return 0


def _cmd_synth(args, parser) -> int:
    scene = _scene_config(args, render=True)
    frames, truth = synth.generate(scene)
    os.makedirs(args.output_dir, exist_ok=True)
    for i, fr in enumerate(frames):
        Image.fromarray((fr * 255).round().astype(np.uint8), mode="L").save(
            os.path.join(args.output_dir, f"frame_{i:03d}.png")
        )
    write_pfm(os.path.join(args.output_dir, "gt_inverse_depth.pfm"),
              truth.ref_inverse_depth)
    cfg = _pipeline_config(args)
    cfg.input = os.path.join(args.output_dir, "frame_*.png")
    report = run(cfg)
    print(json.dumps({"output_dir": cfg.output_dir, "features": report.feature_count,
                      "ba_iterations": report.ba["iterations"],
                      "converged": report.ba["converged"]}))
    return 0


def _cmd_bench(args, parser) -> int:
    scene = _scene_config(args, render=False)
    records = synth.bench_convergence(
        scene, args.trials, ba.BAOptions(max_iter=args.ba_max_iter, ftol=args.ba_ftol)
    )
    out = sys.stdout
    if args.out:
        out = open(args.out, "w")
    try:
        for rec in records:
            out.write(json.dumps(rec, sort_keys=True))
            out.write("\n")
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_calib_eval(args, parser) -> int:
    est = args.__dict__
    if args.est_report:
        with open(args.est_report) as f:
            calib = json.load(f)["calibration"]
        est_focal, est_k1, est_k2 = calib["focal"], calib["k1"], calib["k2"]
    else:
        if args.est_focal is None:
            parser.error("need --est-report or --est-focal/--est-k1/--est-k2")
        est_focal, est_k1, est_k2 = args.est_focal, args.est_k1, args.est_k2
    size = (args.width, args.height)
    pp = image_center(size)
    est_cam = CameraModel(Intrinsics(est_focal, pp, size), Distortion(est_k1, est_k2))
    truth_cam = CameraModel(
        Intrinsics(args.truth_focal, pp, size), Distortion(args.truth_k1, args.truth_k2)
    )
    result = {
        "grid_error_px": synth.grid_distortion_error(est_cam, truth_cam, args.grid_step),
        "focal_error_pct": synth.eval_focal(est_focal, args.truth_focal),
    }
    print(json.dumps(result, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="smd", description="Depth from small-motion bursts"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the pipeline on extracted frames")
    p_run.add_argument("--input", required=True, help="glob pattern of PNG/PGM frames")
    _add_pipeline_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_synth = sub.add_parser("synth", help="render a synthetic scene and run on it")
    _add_scene_flags(p_synth)
    _add_pipeline_flags(p_synth)
    p_synth.set_defaults(func=_cmd_synth)

    p_bench = sub.add_parser("bench", help="convergence benchmark (rank1 vs flat)")
    p_bench.add_argument("--trials", type=int, default=10)
    p_bench.add_argument("--out", help="write JSONL here instead of stdout")
    _add_scene_flags(p_bench)
    p_bench.add_argument("--ba-max-iter", type=int, default=100)
    p_bench.add_argument("--ba-ftol", type=float, default=1e-6)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--config", help="key = value file; flags win")
    p_bench.set_defaults(func=_cmd_bench)

    p_cal = sub.add_parser("calib-eval", help="pixel-grid distortion error")
    p_cal.add_argument("--est-report", help="report.json of a run")
    p_cal.add_argument("--est-focal", type=float)
    p_cal.add_argument("--est-k1", type=float, default=0.0)
    p_cal.add_argument("--est-k2", type=float, default=0.0)
    p_cal.add_argument("--truth-focal", type=float, required=True)
    p_cal.add_argument("--truth-k1", type=float, default=0.0)
    p_cal.add_argument("--truth-k2", type=float, default=0.0)
    p_cal.add_argument("--width", type=int, default=1280)
    p_cal.add_argument("--height", type=int, default=720)
    p_cal.add_argument("--grid-step", type=int, default=40)
    p_cal.add_argument("--config", help="key = value file; flags win")
    p_cal.set_defaults(func=_cmd_calib_eval)

    args = parser.parse_args(argv)
    sub_parser = {
        "run": p_run, "synth": p_synth, "bench": p_bench, "calib-eval": p_cal
    }[args.command]
    try:
        _apply_config(args, sub_parser)
        return args.func(args, sub_parser)
    except SmallMotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
