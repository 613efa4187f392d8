"""Scikit-learn style front end for the reconstruction pipeline.

``SmallMotionDepth`` follows the estimator protocol: hyperparameters are
constructor arguments, ``fit`` consumes a burst of frames and exposes the
recovered calibration, poses and sparse inverse depths as trailing-underscore
attributes, and ``predict`` densifies to an inverse-depth map for the fitted
burst. ``get_params`` / ``set_params`` / ``clone`` work as usual, so the
estimator composes with the wider ecosystem.
"""

from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator

from . import ba, features, plane_sweep, rank1
from .geometry import Intrinsics
from .image import check_gray_image, check_same_size


def check_frames(frames) -> list[np.ndarray]:
    """Validate a burst: >= 2 equal-size 2D float images with values in [0, 1]."""
    if not hasattr(frames, "__len__") or len(frames) < 2:
        raise ValueError("need a sequence of at least 2 frames")
    out = [check_gray_image(f, f"frame {i}") for i, f in enumerate(frames)]
    check_same_size(out)
    return out


class SmallMotionDepth(BaseEstimator):
    """Depth from a small-motion burst of grayscale frames.

    Parameters mirror the pipeline defaults: gridded corner extraction with
    pyramidal tracking, rank-1 initialization, self-calibrating bundle
    adjustment and a plane-sweep densification.

    Attributes set by :meth:`fit`: ``focal_``, ``k1_``, ``k2_``, ``poses_``,
    ``omegas_``, ``tracks_``, ``ba_report_``. :meth:`predict` additionally
    sets ``depth_map_`` and returns the inverse-depth array with NaN at
    invalid pixels.
    """

    def __init__(
        self,
        grid_size: int = 80,
        window_radius: int = 10,
        levels: int = 3,
        n_planes: int = 128,
        sweep_downscale: int = 2,
        init_mode: str = "rank1",
        max_iter: int = 100,
        ftol: float = 1e-6,
        huber_delta: float = 1.0,
        threads: int = 1,
    ):
        self.grid_size = grid_size
        self.window_radius = window_radius
        self.levels = levels
        self.n_planes = n_planes
        self.sweep_downscale = sweep_downscale
        self.init_mode = init_mode
        self.max_iter = max_iter
        self.ftol = ftol
        self.huber_delta = huber_delta
        self.threads = threads

    def fit(self, frames, y=None):
        frames = check_frames(frames)
        threads = self.threads if self.threads > 0 else (os.cpu_count() or 1)
        params = features.TrackingParams(
            grid_size=self.grid_size,
            window_radius=self.window_radius,
            levels=self.levels,
        )
        self.tracks_ = features.build_tracks(frames, 0, params, threads=threads)
        intr = Intrinsics.initial_for(self.tracks_.image_size)
        state0 = rank1.initial_state(self.tracks_, intr, mode=self.init_mode)
        opts = ba.BAOptions(
            max_iter=self.max_iter, ftol=self.ftol, delta=self.huber_delta
        )
        state, report = ba.solve(state0, self.tracks_, opts)
        self._state = state
        self._frames = frames
        self.focal_ = state.focal
        self.k1_ = state.k1
        self.k2_ = state.k2
        self.poses_ = list(state.poses)
        self.omegas_ = state.omegas.copy()
        self.ba_report_ = report
        return self

    def predict(self, frames=None) -> np.ndarray:
        """Dense inverse-depth map for the fitted burst (NaN where invalid)."""
        if not hasattr(self, "_state"):
            raise RuntimeError("call fit before predict")
        if frames is None:
            frames = self._frames
        else:
            frames = check_frames(frames)
        threads = self.threads if self.threads > 0 else (os.cpu_count() or 1)
        planes = plane_sweep.sample_planes(
            0.9 * float(self.omegas_.min()),
            1.1 * float(self.omegas_.max()),
            self.n_planes,
        )
        volume = plane_sweep.sweep(
            frames[0], frames[1:], self._state, planes,
            downscale=self.sweep_downscale, threads=threads,
        )
        dmap = plane_sweep.median_refine(
            plane_sweep.winner_take_all(volume, planes), radius=2
        )
        self.depth_map_ = dmap
        out = dmap.inverse_depth.astype(np.float64)
        out[~dmap.valid] = np.nan
        return out

    def fit_predict(self, frames, y=None) -> np.ndarray:
        return self.fit(frames).predict()
