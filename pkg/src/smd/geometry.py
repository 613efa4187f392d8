"""Camera geometry: pinhole projection, two-coefficient radial distortion with
its iterative inverse, axis-angle rotations, and inverse-depth back-projection.

Conventions used throughout the package:

    - Pixel coordinates are (u, v) with u along the image width; pixel centers
      sit on integer coordinates, so an image spans [-0.5, width - 0.5].
    - Normalized coordinates are (x, y) = ((u - cx) / f, (v - cy) / f).
    - Distortion acts on normalized coordinates:
          x_d = x_u * (1 + k1 * r^2 + k2 * r^4),   r^2 = |x_u|^2
    - A pose maps reference-frame points into its frame: X_frame = R X_ref + t.
      The reference frame itself always carries the identity pose, and the
      camera center of a frame expressed in reference coordinates is -R^T t.
    - A sparse scene point is a reference ray (x, y) plus inverse depth w:
          P = (x / w, y / w, 1 / w)

All operations are pure and accept either a single coordinate pair or an
(..., 2) / (..., 3) stack; they broadcast over leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, NonConvergent, NonPositiveDepth


def _lock(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Intrinsics:
    """Focal length (square pixels), principal point and image size."""

    focal: float
    principal_point: np.ndarray  # (2,) pixels
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "focal", float(self.focal))
        pp = _lock(np.asarray(self.principal_point, dtype=np.float64).reshape(2))
        object.__setattr__(self, "principal_point", pp)
        w, h = self.image_size
        object.__setattr__(self, "image_size", (int(w), int(h)))
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if w < 16 or h < 16:
            raise ValueError(f"image size must be at least 16x16, got {w}x{h}")
        if np.any(pp < 0) or pp[0] > w or pp[1] > h:
            raise ValueError(f"principal point {pp} outside image bounds {w}x{h}")

    @staticmethod
    def initial_for(image_size: tuple[int, int]) -> "Intrinsics":
        """Initialization rule: focal = max(width, height), center principal point."""
        w, h = int(image_size[0]), int(image_size[1])
        return Intrinsics(float(max(w, h)), image_center(image_size), (w, h))


def image_center(image_size: tuple[int, int]) -> np.ndarray:
    """Centroid of the pixel grid, ((w - 1) / 2, (h - 1) / 2)."""
    w, h = image_size
    return np.array([(w - 1) / 2.0, (h - 1) / 2.0])


@dataclass(frozen=True)
class Distortion:
    """Radial distortion coefficients of the r^2 / r^4 polynomial."""

    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "k1", float(self.k1))
        object.__setattr__(self, "k2", float(self.k2))
        if abs(self.k1) > 2 or abs(self.k2) > 2:
            raise ValueError(f"|k1|, |k2| must be <= 2, got {self.k1}, {self.k2}")


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics plus radial distortion."""

    intrinsics: Intrinsics
    distortion: Distortion

    @property
    def focal(self) -> float:
        return self.intrinsics.focal


@dataclass(frozen=True)
class Rotation:
    """Axis-angle rotation with a cached orthonormal matrix.

    Construct through :func:`so3_exp` or :meth:`identity`; the matrix always
    equals the exponential map of ``axis_angle``.
    """

    axis_angle: np.ndarray  # (3,) radians
    matrix: np.ndarray  # (3, 3)

    def __post_init__(self):
        object.__setattr__(self, "axis_angle", _lock(np.reshape(self.axis_angle, 3)))
        R = _lock(np.reshape(self.matrix, (3, 3)))
        object.__setattr__(self, "matrix", R)
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-12:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise ValueError("rotation matrix determinant is not +1")

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.zeros(3), np.eye(3))

    def inverse(self) -> "Rotation":
        return Rotation(-self.axis_angle, self.matrix.T)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate one point or an (..., 3) stack."""
        return np.asarray(points) @ self.matrix.T


@dataclass(frozen=True)
class Pose:
    """Rigid transform X_frame = R X_ref + t."""

    rotation: Rotation
    translation: np.ndarray  # (3,) scene units

    def __post_init__(self):
        object.__setattr__(self, "translation", _lock(np.reshape(self.translation, 3)))

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    def center(self) -> np.ndarray:
        """Camera center in reference coordinates, -R^T t."""
        return -self.rotation.matrix.T @ self.translation

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.apply(points) + self.translation


@dataclass(frozen=True)
class InverseDepthPoint:
    """Reference ray (x, y) with inverse depth omega; omega > 0 for a valid point."""

    ref_normalized: np.ndarray  # (2,)
    omega: float

    def __post_init__(self):
        object.__setattr__(self, "ref_normalized", _lock(np.reshape(self.ref_normalized, 2)))
        object.__setattr__(self, "omega", float(self.omega))


def pixel_to_normalized(p: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """(u, v) -> ((u - cx) / f, (v - cy) / f); exact inverse of normalized_to_pixel."""
    p = np.asarray(p, dtype=np.float64)
    return (p - intrinsics.principal_point) / intrinsics.focal


def normalized_to_pixel(x: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * intrinsics.focal + intrinsics.principal_point


def distort(x_u: np.ndarray, dist: Distortion) -> np.ndarray:
    """Apply the radial polynomial to undistorted normalized coordinates."""
    x_u = np.asarray(x_u, dtype=np.float64)
    r2 = np.sum(x_u * x_u, axis=-1, keepdims=True)
    return x_u * (1.0 + dist.k1 * r2 + dist.k2 * r2 * r2)


def undistort_with_status(
    x_d: np.ndarray, dist: Distortion, tol: float = 1e-10, max_iter: int = 20,
    polish: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-point inverse of :func:`distort`; returns (points, converged mask).

    Iterates x <- x_d / (1 + k1 r(x)^2 + k2 r(x)^4) from x = x_d. The mask is
    False where the residual |distort(x) - x_d| still exceeds ``tol`` after
    ``max_iter`` sweeps (point outside the invertible radius of the model).
    With ``polish`` the iteration continues past ``tol`` until the residual
    stops improving, i.e. to the round-off plateau.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    x_d = np.asarray(x_d, dtype=np.float64)
    x = x_d.copy()
    prev_worst = np.inf
    for _ in range(max_iter):
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        x = x_d / (1.0 + dist.k1 * r2 + dist.k2 * r2 * r2)
        err = np.linalg.norm(distort(x, dist) - x_d, axis=-1)
        worst = float(np.max(err)) if err.size else 0.0
        if polish:
            if worst >= prev_worst:
                break
            prev_worst = worst
        elif np.all(err <= tol):
            break
    err = np.linalg.norm(distort(x, dist) - x_d, axis=-1)
    return x, err <= tol


def undistort(
    x_d: np.ndarray, dist: Distortion, tol: float = 1e-10, max_iter: int = 20
) -> np.ndarray:
    """Inverse distortion mapping; raises :class:`NonConvergent` on failure."""
    x, ok = undistort_with_status(x_d, dist, tol=tol, max_iter=max_iter)
    if not np.all(ok):
        worst = float(np.max(np.linalg.norm(distort(x, dist) - np.asarray(x_d), axis=-1)))
        raise NonConvergent(
            f"undistortion residual {worst:.3e} > tol {tol:.1e} after {max_iter} iterations"
        )
    return x


def cross_matrix(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]_x with [v]_x w = v x w."""
    v = np.reshape(v, 3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_matrix(theta: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a series branch near zero angle."""
    theta = np.reshape(np.asarray(theta, dtype=np.float64), 3)
    t2 = float(theta @ theta)
    K = cross_matrix(theta)
    if t2 < 1e-16:
        # sin(t)/t and (1-cos(t))/t^2 to O(t^4)
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        t = np.sqrt(t2)
        a = np.sin(t) / t
        b = (1.0 - np.cos(t)) / t2
    return np.eye(3) + a * K + b * (K @ K)


def so3_exp(theta: np.ndarray) -> Rotation:
    """Exponential map of a 3-vector of radians onto a Rotation."""
    theta = np.reshape(np.asarray(theta, dtype=np.float64), 3)
    return Rotation(theta, rotation_matrix(theta))


def rotate_points_jacobian(theta: np.ndarray, points: np.ndarray) -> np.ndarray:
    """d(R(theta) p)/d(theta) for an (m, 3) stack of points, shape (m, 3, 3).

    Uses the compact closed form dR/dtheta_i = ((theta_i [theta]_x +
    [theta x ((I - R) e_i)]_x) / |theta|^2) R, falling back to the exact
    limit -[p]_x at theta = 0.
    """
    theta = np.reshape(np.asarray(theta, dtype=np.float64), 3)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    t2 = float(theta @ theta)
    jac = np.empty((pts.shape[0], 3, 3))
    if t2 < 1e-16:
        # d(R p)/dtheta -> -[p]_x as theta -> 0
        jac[:, :, :] = 0.0
        jac[:, 0, 1] = pts[:, 2]
        jac[:, 0, 2] = -pts[:, 1]
        jac[:, 1, 0] = -pts[:, 2]
        jac[:, 1, 2] = pts[:, 0]
        jac[:, 2, 0] = pts[:, 1]
        jac[:, 2, 1] = -pts[:, 0]
        return jac
    R = rotation_matrix(theta)
    K = cross_matrix(theta)
    rp = pts @ R.T
    ImR = np.eye(3) - R
    for i in range(3):
        w = np.cross(theta, ImR[:, i])
        dRi = (theta[i] * K + cross_matrix(w)) / t2
        jac[:, :, i] = rp @ dRi.T
    return jac


def backproject(point: InverseDepthPoint) -> np.ndarray:
    """Inverse-depth parametrization to a 3D point, (x/w, y/w, 1/w)."""
    if point.omega <= 0:
        raise NonPositiveDepth(f"omega must be > 0, got {point.omega}")
    x, y = point.ref_normalized
    w = point.omega
    return np.array([x / w, y / w, 1.0 / w])


def project(
    P: np.ndarray, pose: Pose, intrinsics: Intrinsics, dist: Distortion
) -> np.ndarray:
    """Transform, dehomogenize, distort and map to pixels.

    Raises :class:`BehindCamera` when any depth component is <= 1e-9.
    """
    P = np.asarray(P, dtype=np.float64)
    X = pose.apply(P)
    z = X[..., 2:]
    if np.any(z <= 1e-9):
        raise BehindCamera(f"depth component {float(np.min(z)):.3e} <= 1e-9")
    x_u = X[..., :2] / z
    return normalized_to_pixel(distort(x_u, dist), intrinsics)
