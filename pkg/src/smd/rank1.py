"""Rank-1 initialization of camera translations and inverse depths.

Per-frame rotations are estimated from the tracked correspondences, each
observation is rotated back onto the reference plane, and the stacked
rotation-compensated flow vectors form a 3n x m constraint matrix that is
rank-1 in the ideal micro-baseline case: its best rank-1 factors are the
stacked camera centers and the per-point inverse depths. One alternation
round (rotation re-fit on translation-compensated points, then a second
factorization) removes the translation-flow bias of the first rotation fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ba
from .errors import Degenerate, DegenerateMotion, SignAmbiguous
from .features import TrackTable
from .geometry import (
    Intrinsics,
    InverseDepthPoint,
    Pose,
    Rotation,
    pixel_to_normalized,
    rotate_points_jacobian,
    rotation_matrix,
    so3_exp,
)

OMEGA_FLOOR = 1e-3  # keeps back-projection finite for outlier columns


@dataclass(frozen=True)
class Rank1Problem:
    """Constraint matrix M (3n x m); row block i holds frame i's flow rows."""

    M: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] % 3 != 0:
            raise ValueError(f"M must be (3n, m), got {M.shape}")
        if not np.all(np.isfinite(M)):
            raise ValueError("M contains non-finite entries")
        object.__setattr__(self, "M", M)

    @property
    def n_frames(self) -> int:
        return self.M.shape[0] // 3

    @property
    def m_points(self) -> int:
        return self.M.shape[1]


@dataclass(frozen=True)
class Rank1Solution:
    """Factors of the best rank-1 approximation M ~ C D^T.

    C stacks the per-frame camera centers (3n,), D holds the inverse depths
    (m,) under the gauge mean(D) = 1, median(D) > 0. ``residual`` is the
    relative Frobenius error of the approximation.
    """

    C: np.ndarray
    D: np.ndarray
    sigma: tuple[float, float]
    residual: float

    def center(self, i: int) -> np.ndarray:
        return self.C[3 * i : 3 * i + 3]


def estimate_rotation(
    ref_pts: np.ndarray,
    frame_pts: np.ndarray,
    max_iter: int = 10,
    step_tol: float = 1e-12,
    remove_mean_flow: bool = False,
) -> Rotation:
    """Rotation R minimizing sum_j |pi(R^T [frame_j; 1]) - ref_j|^2.

    Gauss-Newton over the axis-angle vector from theta = 0; suitable for the
    micro-rotation regime where the start is already near the optimum.

    With ``remove_mean_flow`` the per-frame mean of the flow residual is
    projected out of the fit, leaving the rotation constrained by the
    spatially varying part of its flow field only. A plain fit soaks up the
    constant component of the translational flow (which looks like a small
    pan/tilt); the mean-free variant is what the rank-1 initialization uses
    for its first round, before any translation estimate exists.

    Raises Degenerate when the 3x3 normal matrix is ill-conditioned.
    """
    ref = np.atleast_2d(np.asarray(ref_pts, dtype=np.float64))
    frm = np.atleast_2d(np.asarray(frame_pts, dtype=np.float64))
    if ref.shape != frm.shape or ref.shape[0] < 3:
        raise ValueError("need matching point sets with m >= 3")
    v = np.concatenate([frm, np.ones((frm.shape[0], 1))], axis=1)
    theta = np.zeros(3)
    for _ in range(max_iter):
        R = rotation_matrix(theta)
        w = v @ R  # rows R^T v_j
        pi = w[:, :2] / w[:, 2:]
        e = pi - ref
        # w(theta) = R(-theta) v, so dw/dtheta = -d(R(phi) v)/dphi at phi=-theta
        dw = -rotate_points_jacobian(-theta, v)
        dpi = np.zeros((v.shape[0], 2, 3))
        iz = 1.0 / w[:, 2]
        dpi[:, 0, 0] = iz
        dpi[:, 1, 1] = iz
        dpi[:, 0, 2] = -w[:, 0] * iz * iz
        dpi[:, 1, 2] = -w[:, 1] * iz * iz
        J = np.einsum("mij,mjk->mik", dpi, dw)
        if remove_mean_flow:
            e = e - np.mean(e, axis=0, keepdims=True)
            J = J - np.mean(J, axis=0, keepdims=True)
        J = J.reshape(-1, 3)
        H = J.T @ J
        if np.linalg.cond(H) > 1e12:
            raise Degenerate("rotation normal matrix condition number > 1e12")
        step = np.linalg.solve(H, -J.T @ e.reshape(-1))
        theta = theta + step
        if np.linalg.norm(step) < step_tol:
            break
    return so3_exp(theta)


def flow_residual(
    rotation: Rotation, ref_pt: np.ndarray, frame_pt: np.ndarray
) -> np.ndarray:
    """Rotation-compensated flow of one observation relative to its reference
    point, h(R^T [frame; 1]) - [ref; 1]; the third component is identically 0."""
    r = _flow_residuals(
        rotation, np.reshape(ref_pt, (1, 2)), np.reshape(frame_pt, (1, 2))
    )
    return r[0]


def _flow_residuals(
    rotation: Rotation, ref_pts: np.ndarray, frame_pts: np.ndarray
) -> np.ndarray:
    """(m, 3) stack of flow residuals for one frame."""
    v = np.concatenate([frame_pts, np.ones((frame_pts.shape[0], 1))], axis=1)
    w = v @ rotation.matrix  # rows R^T v_j
    h = w[:, :2] / w[:, 2:]
    out = np.zeros((frame_pts.shape[0], 3))
    out[:, :2] = h - ref_pts
    return out


def build_constraint_matrix(
    ref_pts: np.ndarray, obs_pts: np.ndarray, rotations: list[Rotation]
) -> Rank1Problem:
    """Stack per-frame flow residuals into the (3n, m) constraint matrix.

    ``ref_pts`` is (m, 2) and ``obs_pts`` is (n, m, 2), both in normalized
    coordinates; rows 3i..3i+2 of column j hold the flow of point j in frame i.
    """
    n = obs_pts.shape[0]
    if len(rotations) != n:
        raise ValueError(f"{len(rotations)} rotations for {n} frames")
    m = ref_pts.shape[0]
    M = np.empty((3 * n, m))
    for i, rot in enumerate(rotations):
        M[3 * i : 3 * i + 3] = _flow_residuals(rot, ref_pts, obs_pts[i]).T
    return Rank1Problem(M)


def rank1_factorize(problem: Rank1Problem) -> Rank1Solution:
    """Best rank-1 approximation M ~ C D^T by SVD, re-gauged.

    The sign is chosen so median(D) > 0 and the scale so mean(D) = 1; the
    product C D^T is invariant under the re-gauging. Raises DegenerateMotion
    for a vanishing matrix (no usable translation signal) and SignAmbiguous
    when the median of D is numerically zero.
    """
    M = problem.M
    if problem.n_frames < 2:
        raise ValueError("need at least 2 frames")
    if problem.m_points < 16:
        raise ValueError("need at least 16 points")
    norm = float(np.linalg.norm(M))
    if norm <= 1e-12:
        raise DegenerateMotion("constraint matrix is numerically zero")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s[0] / norm < 1e-6:
        raise DegenerateMotion("leading singular value vanishes")
    C = s[0] * U[:, 0]
    D = Vt[0].copy()
    med = float(np.median(D))
    if abs(med) < 1e-12:
        raise SignAmbiguous("median of D is numerically zero")
    if med < 0:
        C = -C
        D = -D
    mu = float(np.mean(D))
    D = D / mu
    C = C * mu
    residual = float(np.sqrt(np.sum(s[1:] ** 2)) / norm)
    return Rank1Solution(C, D, (float(s[0]), float(s[1])), residual)


def _translation_flow(
    centers: np.ndarray, omegas: np.ndarray, ref_pts: np.ndarray
) -> np.ndarray:
    """Predicted (n, m, 2) translational flow in the reference plane.

    For center c and inverse depth w at reference ray p = [x, y, 1], the
    rotation-compensated flow is (c_z p - c) * w / (1 - w c_z).
    """
    p = np.concatenate([ref_pts, np.ones((ref_pts.shape[0], 1))], axis=1)  # (m, 3)
    cz = centers[:, 2][:, None]  # (n, 1)
    denom = 1.0 - omegas[None, :] * cz  # (n, m)
    num = cz[:, :, None] * p[None, :, :] - centers[:, None, :]  # (n, m, 3)
    flow = num * (omegas[None, :] / denom)[:, :, None]
    return flow[:, :, :2]


def _refit_pose(
    ref_pts: np.ndarray,
    frame_pts: np.ndarray,
    omegas: np.ndarray,
    theta0: np.ndarray,
    center0: np.ndarray,
    max_iter: int = 6,
    step_tol: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint per-frame refinement of (rotation, center, constant offset).

    Minimizes |h(R^T [frame; 1]) - ref - flow(c, w) - b|^2 over the rotation
    vector, the camera center and a free constant b. Pan/tilt and a constant
    translational flow are near-degenerate at micro baselines, and the
    factorization leaves the inverse depths with an undetermined affine shift
    whose flow is exactly constant per frame; solving with b free keeps both
    biases out of the rotation, which is then pinned by the spatially varying
    part of its own flow field. Returns (theta, center, b).
    """
    m = ref_pts.shape[0]
    v = np.concatenate([frame_pts, np.ones((m, 1))], axis=1)
    p2 = ref_pts
    q = np.concatenate([
        np.asarray(theta0, dtype=np.float64),
        np.asarray(center0, dtype=np.float64),
        np.zeros(2),
    ])
    for it in range(max_iter):
        theta, c, b = q[:3], q[3:6], q[6:]
        R = rotation_matrix(theta)
        w = v @ R
        h = w[:, :2] / w[:, 2:]
        s = omegas / (1.0 - omegas * c[2])
        flow = (c[2] * p2 - c[:2][None, :]) * s[:, None]
        e = h - p2 - flow - b[None, :]
        dw = -rotate_points_jacobian(-theta, v)
        iz = 1.0 / w[:, 2]
        dpi = np.zeros((m, 2, 3))
        dpi[:, 0, 0] = iz
        dpi[:, 1, 1] = iz
        dpi[:, 0, 2] = -w[:, 0] * iz * iz
        dpi[:, 1, 2] = -w[:, 1] * iz * iz
        J_theta = np.einsum("mij,mjk->mik", dpi, dw)
        J_c = np.zeros((m, 2, 3))
        ds_dcz = omegas**2 / (1.0 - omegas * c[2]) ** 2
        J_c[:, 0, 0] = s
        J_c[:, 1, 1] = s
        J_c[:, 0, 2] = -(p2[:, 0] * s + (c[2] * p2[:, 0] - c[0]) * ds_dcz)
        J_c[:, 1, 2] = -(p2[:, 1] * s + (c[2] * p2[:, 1] - c[1]) * ds_dcz)
        J_b = np.zeros((m, 2, 2))
        J_b[:, 0, 0] = -1.0
        J_b[:, 1, 1] = -1.0
        J = np.concatenate([J_theta, J_c, J_b], axis=2).reshape(-1, 8)
        H = J.T @ J
        if it == 0 and np.linalg.cond(H) > 1e12:
            raise Degenerate("joint pose refit normal matrix ill-conditioned")
        step = np.linalg.solve(H, -J.T @ e.reshape(-1))
        q = q + step
        if np.linalg.norm(step) < step_tol:
            break
    return q[:3], q[3:6], q[6:]




def initialize(
    table: TrackTable, intrinsics: Intrinsics
) -> tuple[list[Pose], list[InverseDepthPoint], Rank1Solution]:
    """Full sparse initialization from a track table.

    Normalizes tracks with the given intrinsics and zero distortion, fits
    per-frame rotations (mean-flow-free, so the constant part of the unknown
    translational flow is not soaked up as pan/tilt), factorizes the flow
    matrix, then alternates a few re-estimation rounds: per-frame joint
    (rotation, center, offset) refits against the translation-compensated
    model, followed by a per-point least-squares inverse-depth update that
    couples all frames. A final factorization of the rebuilt matrix produces
    the reported solution. Returns per-frame poses, per-point inverse-depth
    points (floored at 1e-3) and that final factorization.

    Note the sign relation: with the flow residual defined here, the ideal
    matrix is M ~ (-c) w^T, so the camera centers are the negated blocks of
    the factor C once D is gauged positive.
    """
    ref_n = pixel_to_normalized(table.ref_points, intrinsics)
    obs_n = pixel_to_normalized(table.obs, intrinsics)
    n = table.n_frames

    rotations = [
        estimate_rotation(ref_n, obs_n[i], remove_mean_flow=True) for i in range(n)
    ]
    sol = rank1_factorize(build_constraint_matrix(ref_n, obs_n, rotations))
    thetas = [rot.axis_angle for rot in rotations]
    centers = -sol.C.reshape(n, 3)
    omegas = np.maximum(sol.D, OMEGA_FLOOR)

    for _ in range(5):
        offsets = np.empty((n, 2))
        for i in range(n):
            thetas[i], centers[i], offsets[i] = _refit_pose(
                ref_n, obs_n[i], omegas, thetas[i], centers[i]
            )
        rotations = [so3_exp(t) for t in thetas]
        omegas = _omega_update(ref_n, obs_n, rotations, centers, offsets)

    sol = rank1_factorize(build_constraint_matrix(ref_n, obs_n, rotations))
    centers = -sol.C.reshape(n, 3)
    omegas = np.maximum(sol.D, OMEGA_FLOOR)

    poses = [
        Pose(rot, -rot.matrix @ centers[i]) for i, rot in enumerate(rotations)
    ]
    points = [
        InverseDepthPoint(ref_n[j], omegas[j]) for j in range(table.m_points)
    ]
    return poses, points, sol


def _omega_update(
    ref_pts: np.ndarray,
    obs_pts: np.ndarray,
    rotations: list[Rotation],
    centers: np.ndarray,
    offsets: np.ndarray,
) -> np.ndarray:
    """Per-point least-squares inverse depths given all frame poses.

    Each flow observation is modeled as -w_j (c_i - c_i,z p_j) plus the
    per-frame constant; stacking every frame couples the shared depth vector
    to all cameras at once, which is what pins the affine shift a per-frame
    fit cannot see.
    """
    n, m = obs_pts.shape[0], ref_pts.shape[0]
    M = build_constraint_matrix(ref_pts, obs_pts, rotations).M
    num = np.zeros(m)
    den = np.zeros(m)
    for i in range(n):
        a = np.stack(
            [
                centers[i, 0] - centers[i, 2] * ref_pts[:, 0],
                centers[i, 1] - centers[i, 2] * ref_pts[:, 1],
            ],
            axis=1,
        )
        flow = M[3 * i : 3 * i + 2].T - offsets[i][None, :]
        num += -np.sum(a * flow, axis=1)
        den += np.sum(a * a, axis=1)
    return num / np.maximum(den, 1e-30)


def initial_state(
    table: TrackTable, intrinsics: Intrinsics, mode: str = "rank1"
) -> "ba.BAState":
    """Bundle-adjustment start state for the given initialization mode.

    ``rank1`` runs :func:`initialize`; ``flat`` keeps the estimated rotations
    but starts from unit inverse depths and zero translations.
    """
    if mode == "rank1":
        poses, points, _ = initialize(table, intrinsics)
        omegas = np.array([pt.omega for pt in points])
    elif mode == "flat":
        ref_n = pixel_to_normalized(table.ref_points, intrinsics)
        obs_n = pixel_to_normalized(table.obs, intrinsics)
        rotations = [
            estimate_rotation(ref_n, obs_n[i]) for i in range(table.n_frames)
        ]
        poses = [Pose(rot, np.zeros(3)) for rot in rotations]
        omegas = np.ones(table.m_points)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return ba.BAState(
        focal=intrinsics.focal,
        k1=0.0,
        k2=0.0,
        poses=poses,
        omegas=omegas,
        gauge_point=ba.gauge_index(omegas),
    )
