"""Depth from small-motion bursts.

Recovers camera self-calibration (focal length and radial distortion),
per-frame poses and sparse inverse depths from a burst of near-identical
frames, using a rank-1 factorization of the rotation-compensated flow matrix
to initialize a self-calibrating bundle adjustment, then densifies with a
plane-sweep photoconsistency search.
"""

from .ba import BAOptions, BAReport, BAState, robust_cost, solve
from .errors import SmallMotionError
from .estimator import SmallMotionDepth, check_frames
from .features import TrackingParams, TrackTable, build_tracks
from .geometry import (
    CameraModel,
    Distortion,
    Intrinsics,
    InverseDepthPoint,
    Pose,
    Rotation,
    backproject,
    distort,
    pixel_to_normalized,
    project,
    so3_exp,
    undistort,
)
from .pfm import read_pfm, write_pfm
from .pipeline import PipelineConfig, RunReport, load_frames, run
from .plane_sweep import (
    CostVolume,
    DepthMap,
    median_refine,
    sample_planes,
    sweep,
    winner_take_all,
)
from .rank1 import (
    Rank1Problem,
    Rank1Solution,
    build_constraint_matrix,
    estimate_rotation,
    flow_residual,
    initial_state,
    initialize,
    rank1_factorize,
)
from .synth import (
    GroundTruth,
    SceneConfig,
    bench_convergence,
    eval_focal,
    generate,
    grid_distortion_error,
    texture_image,
)

__version__ = "0.1.0"

__all__ = [
    "BAOptions", "BAReport", "BAState", "CameraModel", "CostVolume", "DepthMap",
    "Distortion", "GroundTruth", "Intrinsics", "InverseDepthPoint",
    "PipelineConfig", "Pose", "Rank1Problem", "Rank1Solution", "Rotation",
    "RunReport", "SceneConfig", "SmallMotionDepth", "SmallMotionError",
    "TrackTable", "TrackingParams", "backproject", "bench_convergence",
    "build_constraint_matrix", "build_tracks", "check_frames", "distort",
    "estimate_rotation", "eval_focal", "flow_residual", "generate",
    "grid_distortion_error", "initial_state", "initialize", "load_frames",
    "median_refine", "pixel_to_normalized", "project", "rank1_factorize",
    "read_pfm", "robust_cost", "run", "sample_planes", "so3_exp", "solve",
    "sweep", "texture_image", "undistort", "winner_take_all", "write_pfm",
]
