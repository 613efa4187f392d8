"""Feature extraction and tracking tests."""

import numpy as np
import pytest

from smd.errors import ImageTooSmall, SizeMismatch, TooFewTracks
from smd.features import (
    TrackingParams,
    TrackTable,
    build_tracks,
    grid_extract,
    klt_track_pair,
    shi_tomasi_response,
    threshold_extract,
)
from smd.image import binomial5, box_sum, gradients
from smd.synth import _WaveTexture


def wave_image(width, height, dx=0.0, dy=0.0, seed=2):
    tex = _WaveTexture(np.random.default_rng(seed), 1 / 120, 1 / 16)
    us, vs = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return np.clip(tex(us - dx, vs - dy), 0.0, 1.0)


def eig_oracle(img, window_radius):
    """Independent response: per-pixel eigvalsh of the structure tensor."""
    gx, gy = gradients(binomial5(img))
    sxx = box_sum(gx * gx, window_radius)
    syy = box_sum(gy * gy, window_radius)
    sxy = box_sum(gx * gy, window_radius)
    h, w = img.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            m = np.array([[sxx[i, j], sxy[i, j]], [sxy[i, j], syy[i, j]]])
            out[i, j] = np.linalg.eigvalsh(m)[0]
    b = window_radius + 1
    out[:b] = 0
    out[-b:] = 0
    out[:, :b] = 0
    out[:, -b:] = 0
    return np.maximum(out, 0.0)


class TestShiTomasiResponse:
    def test_constant_image_zero(self):
        assert np.all(shi_tomasi_response(np.full((50, 60), 0.5), 3) == 0.0)

    def test_nonnegative(self):
        img = wave_image(80, 60)
        assert shi_tomasi_response(img, 3).min() >= 0.0

    def test_matches_eigvalsh_oracle(self):
        img = wave_image(48, 40, seed=5)
        mine = shi_tomasi_response(img, 3)
        oracle = eig_oracle(img, 3)
        np.testing.assert_allclose(mine, oracle, atol=1e-12)

    def test_l_corner_argmax_localizes(self):
        # windowed min-eigenvalue peaks slightly inside an L-corner (the
        # window must cover both edges); the offset is bounded by the window
        # radius plus the gradient spread of the smoothing kernel
        img = np.zeros((64, 64))
        img[:32, :32] = 1.0  # corner of the bright square at (31.5, 31.5)
        for w in (1, 3):
            resp = shi_tomasi_response(img, w)
            iy, ix = np.unravel_index(np.argmax(resp), resp.shape)
            assert abs(ix - 31.5) <= w + 2 and abs(iy - 31.5) <= w + 2
            assert ix < 31.5 and iy < 31.5  # bias points into the corner

    def test_too_small_image(self):
        with pytest.raises(ImageTooSmall):
            shi_tomasi_response(np.zeros((5, 5)), 3)


class TestGridExtract:
    def test_counting_bound(self):
        resp = np.random.default_rng(0).uniform(0.5, 1.0, (1080, 1920))
        feats = grid_extract(resp, 80, 0.0)
        assert len(feats) <= 24 * 14

    def test_single_corner(self):
        resp = np.zeros((100, 100))
        resp[40, 60] = 1.0
        feats = grid_extract(resp, 100, 0.5)
        np.testing.assert_array_equal(feats, [[60, 40]])

    def test_cross_board_one_per_cell_within_1px(self):
        # one '+' cross per 40px cell, at a known jittered position
        rng = np.random.default_rng(3)
        h, w, gs = 160, 200, 40
        img = np.full((h, w), 0.2)
        truth = []
        for cy in range(0, h, gs):
            for cx in range(0, w, gs):
                px = cx + gs // 2 + rng.integers(-5, 6)
                py = cy + gs // 2 + rng.integers(-5, 6)
                img[py - 6 : py + 7, px] = 1.0
                img[py, px - 6 : px + 7] = 1.0
                truth.append((px, py))
        resp = shi_tomasi_response(img, 3)
        feats = grid_extract(resp, gs, 1e-4)
        assert len(feats) == len(truth)
        for (fx, fy), (tx, ty) in zip(feats, truth):
            assert abs(fx - tx) <= 1 and abs(fy - ty) <= 1

    def test_distinct_cells(self):
        resp = shi_tomasi_response(wave_image(320, 240), 5)
        feats = grid_extract(resp, 40, 1e-6)
        cells = {(int(u) // 40, int(v) // 40) for u, v in feats}
        assert len(cells) == len(feats)

    def test_empty_result_ok(self):
        assert grid_extract(np.zeros((100, 100)), 50, 0.1).shape == (0, 2)

    def test_grid_size_validation(self):
        with pytest.raises(ValueError):
            grid_extract(np.zeros((100, 100)), 4, 0.1)


class TestKltTrackPair:
    def test_identity_target(self):
        img = wave_image(200, 150)
        resp = shi_tomasi_response(img, 10)
        pts = grid_extract(resp, 40, 1e-4)
        out, ok = klt_track_pair(img, img, pts)
        assert ok.all()
        np.testing.assert_allclose(out, pts, atol=1e-9)

    def test_integer_shift_recovered(self):
        ref = wave_image(300, 200)
        tgt = wave_image(300, 200, dx=3.0, dy=2.0)
        resp = shi_tomasi_response(ref, 10)
        pts = grid_extract(resp, 50, 1e-4)
        out, ok = klt_track_pair(ref, tgt, pts)
        assert ok.sum() >= 0.5 * len(pts)
        err = np.abs(out[ok] - pts[ok] - [3.0, 2.0])
        assert err.max() <= 0.1

    @pytest.mark.parametrize("delta", [(0.7, -0.4), (-2.3, 1.9), (4.0, 0.0)])
    def test_translation_equivariance(self, delta):
        ref = wave_image(300, 200, seed=7)
        tgt = wave_image(300, 200, dx=delta[0], dy=delta[1], seed=7)
        resp = shi_tomasi_response(ref, 10)
        pts = grid_extract(resp, 50, 1e-4)
        # keep points far enough from the border for the largest shift
        inner = (pts[:, 0] > 50) & (pts[:, 0] < 250) & (pts[:, 1] > 50) & (pts[:, 1] < 150)
        out, ok = klt_track_pair(ref, tgt, pts[inner])
        assert ok.sum() >= 0.8 * inner.sum()
        err = np.abs(out[ok] - pts[inner][ok] - delta)
        assert err.max() <= 0.1

    def test_border_point_fails(self):
        ref = wave_image(200, 150)
        tgt = wave_image(200, 150, dx=5.0)
        pts = np.array([[2.0, 75.0]])  # 2 px from the left border
        _, ok = klt_track_pair(ref, tgt, pts)
        assert not ok[0]

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            klt_track_pair(np.zeros((50, 50)), np.zeros((50, 60)), np.array([[10.0, 10.0]]))


class TestBuildTracks:
    def test_identical_frames(self):
        img = wave_image(300, 200)
        table = build_tracks([img, img, img], 0, TrackingParams(grid_size=40))
        assert table.n_frames == 2
        for i in range(2):
            np.testing.assert_allclose(table.obs[i], table.ref_points, atol=1e-9)

    def test_failed_column_dropped(self):
        ref = wave_image(300, 200, seed=9)
        tgt = wave_image(300, 200, dx=1.0, seed=9)
        params = TrackingParams(grid_size=40)
        table_full = build_tracks([ref, tgt], 0, params)
        # blank a disc around one tracked corner in the target: that track fails
        u, v = table_full.ref_points[5].astype(int)
        tgt2 = tgt.copy()
        tgt2[max(v - 14, 0) : v + 15, max(u - 14, 0) : u + 15] = 0.5
        table_cut = build_tracks([ref, tgt2], 0, params)
        assert table_cut.m_points < table_full.m_points
        # every kept ref point also exists in the full table
        full_set = {tuple(p) for p in table_full.ref_points}
        assert all(tuple(p) in full_set for p in table_cut.ref_points)

    def test_synthetic_sequence_survival(self):
        ref = wave_image(320, 240, seed=11)
        frames = [ref] + [
            wave_image(320, 240, dx=0.31 * i, dy=-0.22 * i, seed=11) for i in range(1, 10)
        ]
        params = TrackingParams(grid_size=40)
        resp = shi_tomasi_response(ref, params.window_radius)
        seeded = grid_extract(resp, params.grid_size, params.min_response)
        table = build_tracks(frames, 0, params)
        assert table.m_points >= 0.9 * len(seeded)

    def test_too_few_tracks(self):
        flat = np.full((100, 100), 0.5)
        with pytest.raises(TooFewTracks):
            build_tracks([flat, flat], 0, TrackingParams(grid_size=20))


class TestReductionProperty:
    def test_grid_vs_threshold(self):
        img = wave_image(640, 480, seed=13)
        resp = shi_tomasi_response(img, 10)
        grid = grid_extract(resp, 80, 1e-4)
        loose = threshold_extract(resp, 1e-4)
        assert len(loose) >= 5 * len(grid)


class TestTrackTableValidation:
    def test_minimum_size(self):
        with pytest.raises(TooFewTracks):
            TrackTable(np.zeros((4, 2)), np.zeros((2, 4, 2)), (100, 100))

    def test_bounds_check(self):
        ref = np.full((20, 2), 10.0)
        obs = np.full((2, 20, 2), 200.0)
        with pytest.raises(ValueError):
            TrackTable(ref, obs, (100, 100))
