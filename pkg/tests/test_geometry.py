"""Geometry tests: distortion round trips, rotations, projection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smd.errors import BehindCamera, NonConvergent, NonPositiveDepth
from smd.geometry import (
    Distortion,
    Intrinsics,
    InverseDepthPoint,
    Pose,
    backproject,
    cross_matrix,
    distort,
    normalized_to_pixel,
    pixel_to_normalized,
    project,
    rotate_points_jacobian,
    rotation_matrix,
    so3_exp,
    undistort,
)


@pytest.fixture
def intr():
    return Intrinsics(1280.0, (960.0, 540.0), (1920, 1080))


def series_expm(theta, terms=20):
    """Power-series oracle for the matrix exponential of [theta]_x."""
    K = cross_matrix(theta)
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms + 1):
        term = term @ K / k
        out = out + term
    return out


class TestPixelNormalized:
    def test_principal_point_maps_to_origin(self, intr):
        np.testing.assert_allclose(
            pixel_to_normalized(intr.principal_point, intr), [0.0, 0.0]
        )

    def test_unit_offset(self, intr):
        np.testing.assert_allclose(
            pixel_to_normalized([2240.0, 540.0], intr), [1.0, 0.0]
        )

    def test_inverse_pair(self, intr):
        rng = np.random.default_rng(0)
        p = rng.uniform(0, [1920, 1080], size=(50, 2))
        back = normalized_to_pixel(pixel_to_normalized(p, intr), intr)
        np.testing.assert_allclose(back, p, atol=1e-12)


class TestDistort:
    def test_zero_coefficients_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(20, 2))
        np.testing.assert_array_equal(distort(x, Distortion(0, 0)), x)

    def test_origin_fixed_point(self):
        np.testing.assert_array_equal(
            distort([0.0, 0.0], Distortion(0.3, -0.1)), [0.0, 0.0]
        )

    def test_hand_evaluated_value(self):
        # 0.5 * (1 + 0.1 * 0.25) = 0.51250
        out = distort([0.5, 0.0], Distortion(0.1, 0.0))
        np.testing.assert_allclose(out, [0.51250, 0.0], atol=1e-15)

    def test_radially_monotone_for_positive_coefficients(self):
        d = Distortion(0.4, 0.2)
        r = np.linspace(1e-4, 1.0, 400)
        x = np.stack([r, np.zeros_like(r)], axis=1)
        rd = np.linalg.norm(distort(x, d), axis=1)
        assert np.all(np.diff(rd) > 0)


class TestUndistort:
    def test_zero_coefficients_exact(self):
        x = np.array([0.31, -0.44])
        out = undistort(x, Distortion(0, 0), max_iter=1)
        np.testing.assert_array_equal(out, x)

    def test_round_trip_grid(self):
        # |k1| <= 0.3, |k2| <= 0.1, |x| <= 0.8; slow contraction at the corner
        # of the coefficient box needs more than the default sweep count
        for k1, k2 in [(-0.3, 0.1), (0.3, -0.1), (-0.12, 0.03), (0.25, 0.08)]:
            d = Distortion(k1, k2)
            g = np.linspace(-0.55, 0.55, 9)  # grid with |x| <= 0.78
            xs = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
            back = undistort(distort(xs, d), d, tol=1e-11, max_iter=60)
            assert np.linalg.norm(back - xs, axis=1).max() <= 1e-10

    def test_nonconvergent_outside_invertible_radius(self):
        with pytest.raises(NonConvergent):
            undistort([0.9, 0.0], Distortion(-1.5, 0.0))

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            undistort([0.1, 0.1], Distortion(0, 0), tol=0.0)
        with pytest.raises(ValueError):
            undistort([0.1, 0.1], Distortion(0, 0), max_iter=0)

    @settings(max_examples=50, deadline=None)
    @given(
        x=st.floats(-0.6, 0.6), y=st.floats(-0.5, 0.5),
        k1=st.floats(-0.3, 0.3), k2=st.floats(-0.1, 0.1),
    )
    def test_round_trip_property(self, x, y, k1, k2):
        d = Distortion(k1, k2)
        out = undistort(distort(np.array([x, y]), d), d)
        assert np.linalg.norm(out - [x, y]) <= 1e-10


class TestRotation:
    def test_zero_is_identity(self):
        np.testing.assert_array_equal(so3_exp([0, 0, 0]).matrix, np.eye(3))

    def test_group_properties(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            R = so3_exp(rng.normal(size=3)).matrix
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(R) - 1.0) <= 1e-12

    def test_matches_series_oracle(self):
        theta = np.array([0.0, 0.0, np.pi / 2])
        assert np.abs(so3_exp(theta).matrix - series_expm(theta)).max() <= 1e-12

    def test_series_oracle_random(self):
        # 20 series terms are only accurate up to |theta| ~ 2
        rng = np.random.default_rng(3)
        for _ in range(10):
            theta = rng.normal(size=3)
            theta *= rng.uniform(0.01, np.pi / 2) / np.linalg.norm(theta)
            assert np.abs(rotation_matrix(theta) - series_expm(theta)).max() <= 1e-12

    def test_inverse_composition(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            theta = rng.normal(size=3)
            theta *= rng.uniform(0, np.pi / 2) / np.linalg.norm(theta)
            prod = so3_exp(theta).matrix @ so3_exp(-theta).matrix
            np.testing.assert_allclose(prod, np.eye(3), atol=1e-12)

    def test_point_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(6, 3))
        for theta in (rng.normal(size=3), np.zeros(3), np.full(3, 1e-13)):
            jac = rotate_points_jacobian(theta, pts)
            eps = 1e-7
            for i in range(3):
                dp = np.zeros(3)
                dp[i] = eps
                fd = (pts @ rotation_matrix(theta + dp).T
                      - pts @ rotation_matrix(theta - dp).T) / (2 * eps)
                assert np.abs(jac[:, :, i] - fd).max() < 1e-6


class TestBackproject:
    def test_unit_depth_on_axis(self):
        pt = InverseDepthPoint([0.0, 0.0], 1.0)
        np.testing.assert_array_equal(backproject(pt), [0, 0, 1])

    def test_direct_substitution(self):
        pt = InverseDepthPoint([0.2, -0.1], 0.5)
        np.testing.assert_allclose(backproject(pt), [0.4, -0.2, 2.0])

    def test_zero_omega_rejected(self):
        with pytest.raises(NonPositiveDepth):
            backproject(InverseDepthPoint([0.1, 0.1], 0.0))


class TestProject:
    def test_optical_axis_hits_principal_point(self, intr):
        out = project([0, 0, 1.0], Pose.identity(), intr, Distortion(0, 0))
        np.testing.assert_allclose(out, intr.principal_point)

    def test_behind_camera(self, intr):
        with pytest.raises(BehindCamera):
            project([0, 0, -1.0], Pose.identity(), intr, Distortion(0, 0))

    def test_reference_round_trip(self, intr):
        # project(backproject(pt)) = normalized_to_pixel(distort(pt.ref_normalized))
        d = Distortion(-0.12, 0.03)
        rng = np.random.default_rng(6)
        for _ in range(1000):
            xy = rng.uniform(-0.5, 0.5, 2)
            om = rng.uniform(0.2, 2.0)
            pt = InverseDepthPoint(xy, om)
            via_project = project(backproject(pt), Pose.identity(), intr, d)
            direct = normalized_to_pixel(distort(xy, d), intr)
            assert np.linalg.norm(via_project - direct) <= 1e-12


class TestTypeValidation:
    def test_intrinsics_bounds(self):
        with pytest.raises(ValueError):
            Intrinsics(-1.0, (10, 10), (100, 100))
        with pytest.raises(ValueError):
            Intrinsics(100.0, (10, 10), (8, 8))
        with pytest.raises(ValueError):
            Intrinsics(100.0, (500, 10), (100, 100))

    def test_distortion_bounds(self):
        with pytest.raises(ValueError):
            Distortion(2.5, 0.0)

    def test_pose_center(self):
        pose = Pose(so3_exp([0.01, -0.02, 0.005]), [0.1, 0.2, -0.3])
        c = pose.center()
        np.testing.assert_allclose(pose.apply(c), np.zeros(3), atol=1e-15)
