"""Self-calibrating bundle adjustment over focal length, radial distortion,
per-frame poses and per-point inverse depths.

Measured features are mapped out of lens distortion (iterative inverse of the
radial model under the current intrinsics) and compared against pinhole
projections of the inverse-depth points; residuals are scaled by the focal
length into pixel units. A Levenberg-Marquardt loop with a Huber loss and a
fixed damping schedule (x10 on rejected steps, /3 on accepted ones) refines
the parameter vector

    [focal, k1, k2, (theta_i, t_i) for each non-reference frame,
     omega_j for every point except the pinned gauge point]

The reference frame keeps the identity pose, and one inverse depth is held
constant to fix the global scale. Bounds (|k| <= 2, focal within [0.25, 4] of
its start, omega >= 1e-4) are clamped after every accepted step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BehindCamera, NonConvergent, NumericalFailure
from .features import TrackTable
from .geometry import (
    Distortion,
    Pose,
    image_center,
    rotate_points_jacobian,
    so3_exp,
    undistort_with_status,
)

UNDISTORT_TOL = 1e-13
UNDISTORT_ITERS = 60
OMEGA_MIN = 1e-4
FOCAL_SPAN = (0.25, 4.0)
Z_EPS = 1e-9


@dataclass
class BAState:
    """Full parameter snapshot; ``poses`` excludes the fixed reference frame."""

    focal: float
    k1: float
    k2: float
    poses: list[Pose]
    omegas: np.ndarray
    gauge_point: int

    def __post_init__(self):
        self.omegas = np.asarray(self.omegas, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def m_points(self) -> int:
        return self.omegas.shape[0]

    @property
    def n_params(self) -> int:
        return 3 + 6 * self.n_frames + self.m_points - 1


@dataclass
class BAOptions:
    max_iter: int = 100
    ftol: float = 1e-6
    xtol: float = 1e-10
    delta: float = 1.0  # Huber threshold, px
    lambda0: float = 1e-4


@dataclass
class BAReport:
    iterations: int
    converged: bool
    initial_cost: float
    final_cost: float
    cost_trace: list[float] = field(default_factory=list)
    wall_time: float = 0.0


def gauge_index(omegas: np.ndarray) -> int:
    """Index of the inverse depth closest to the median (smallest on ties)."""
    omegas = np.asarray(omegas, dtype=np.float64)
    med = float(np.median(omegas))
    return int(np.argmin(np.abs(omegas - med)))


def robust_cost(residual: np.ndarray, delta: float) -> float:
    """Huber loss of one residual vector: |r|^2 inside delta, 2 delta |r| - delta^2 outside."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    s = float(np.linalg.norm(residual))
    if s <= delta:
        return s * s
    return 2.0 * delta * s - delta * delta


def _huber_total(r: np.ndarray, delta: float) -> float:
    s2 = np.sum(r * r, axis=-1)
    s = np.sqrt(s2)
    vals = np.where(s <= delta, s2, 2.0 * delta * s - delta * delta)
    return float(np.sum(vals))


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    s = np.linalg.norm(r, axis=-1)
    w = np.ones_like(s)
    mask = s > delta
    w[mask] = delta / s[mask]
    return w


class _Eval:
    """Intermediate quantities of one residual evaluation."""

    __slots__ = ("r", "ok", "q0", "x_d0", "qi", "x_di", "P", "X", "pi", "dpi", "Rm", "ts")


def _distortion_jacobians(q: np.ndarray, k1: float, k2: float) -> np.ndarray:
    """d(distort(q))/dq for a (..., 2) stack, shape (..., 2, 2)."""
    r2 = np.sum(q * q, axis=-1)
    s = 1.0 + k1 * r2 + k2 * r2 * r2
    sp_ = k1 + 2.0 * k2 * r2  # ds/d(r^2)
    eye = np.eye(2)
    outer = q[..., :, None] * q[..., None, :]
    return s[..., None, None] * eye + 2.0 * sp_[..., None, None] * outer


def _evaluate(state: BAState, tracks: TrackTable) -> _Eval:
    pp = image_center(tracks.image_size)
    f = state.focal
    dist = Distortion(state.k1, state.k2)
    ev = _Eval()
    ev.x_d0 = (tracks.ref_points - pp) / f
    ev.q0, ok0 = undistort_with_status(
        ev.x_d0, dist, UNDISTORT_TOL, UNDISTORT_ITERS, polish=True
    )
    ev.x_di = (tracks.obs - pp) / f
    ev.qi, oki = undistort_with_status(
        ev.x_di, dist, UNDISTORT_TOL, UNDISTORT_ITERS, polish=True
    )
    m = tracks.m_points
    ev.P = np.concatenate([ev.q0, np.ones((m, 1))], axis=1) / state.omegas[:, None]
    ev.Rm = np.stack([p.rotation.matrix for p in state.poses])
    ev.ts = np.stack([p.translation for p in state.poses])
    ev.X = np.einsum("nij,mj->nmi", ev.Rm, ev.P) + ev.ts[:, None, :]
    z = ev.X[:, :, 2]
    zok = z > Z_EPS
    zsafe = np.where(zok, z, 1.0)
    ev.pi = ev.X[:, :, :2] / zsafe[:, :, None]
    ev.r = f * (ev.qi - ev.pi)
    ev.ok = ok0[None, :] & oki & zok
    iz = 1.0 / zsafe
    n = tracks.n_frames
    dpi = np.zeros((n, m, 2, 3))
    dpi[:, :, 0, 0] = iz
    dpi[:, :, 1, 1] = iz
    dpi[:, :, 0, 2] = -ev.X[:, :, 0] * iz * iz
    dpi[:, :, 1, 2] = -ev.X[:, :, 1] * iz * iz
    ev.dpi = dpi
    return ev


def _check_valid(ev: _Eval, tracks: TrackTable, state: BAState) -> None:
    if np.all(ev.ok):
        return
    z = ev.X[:, :, 2]
    if np.any(z <= Z_EPS):
        raise BehindCamera(f"depth component {float(np.min(z)):.3e} <= {Z_EPS:.0e}")
    raise NonConvergent("undistortion failed for at least one observation")


def reproj_residual(
    state: BAState, tracks: TrackTable, frame: int, point: int
) -> np.ndarray:
    """Pixel residual of one observation; ``frame`` 0 is the reference frame.

    The observation is mapped distorted -> undistorted under the current
    intrinsics and compared with the projection of the point's inverse-depth
    parametrization; the difference is scaled by the focal length.
    """
    pp = image_center(tracks.image_size)
    f = state.focal
    dist = Distortion(state.k1, state.k2)
    ref_n = (tracks.ref_points[point] - pp) / f
    q0, ok0 = undistort_with_status(
        ref_n, dist, UNDISTORT_TOL, UNDISTORT_ITERS, polish=True
    )
    if frame == 0:
        observed = tracks.ref_points[point]
        pose = Pose.identity()
    else:
        observed = tracks.obs[frame - 1, point]
        pose = state.poses[frame - 1]
    x_d = (observed - pp) / f
    q, okq = undistort_with_status(
        x_d, dist, UNDISTORT_TOL, UNDISTORT_ITERS, polish=True
    )
    if not (np.all(ok0) and np.all(okq)):
        raise NonConvergent("undistortion failed for this observation")
    P = np.array([q0[0], q0[1], 1.0]) / state.omegas[point]
    X = pose.apply(P)
    if X[2] <= Z_EPS:
        raise BehindCamera(f"depth component {X[2]:.3e} <= {Z_EPS:.0e}")
    return f * (q - X[:2] / X[2])


def residuals(state: BAState, tracks: TrackTable) -> np.ndarray:
    """All non-reference residuals, shape (n, m, 2), in pixels."""
    ev = _evaluate(state, tracks)
    _check_valid(ev, tracks, state)
    return ev.r


def _omega_columns(m: int, gauge: int, offset: int) -> np.ndarray:
    cols = np.arange(m) + offset
    cols[gauge + 1 :] -= 1
    cols[gauge] = -1  # sentinel, filtered out by caller
    return cols


def _jacobian_blocks(state: BAState, tracks: TrackTable, ev: _Eval):
    """Analytic residual derivatives, computed in one vectorized pass."""
    f = state.focal
    k1, k2 = state.k1, state.k2
    n, m = tracks.n_frames, tracks.m_points
    om = state.omegas

    A0 = _distortion_jacobians(ev.q0, k1, k2)
    r0_2 = np.sum(ev.q0 * ev.q0, axis=-1)
    dq0_df = np.linalg.solve(A0, -ev.x_d0[..., None] / f)[..., 0]
    dq0_dk1 = np.linalg.solve(A0, -(ev.q0 * r0_2[:, None])[..., None])[..., 0]
    dq0_dk2 = np.linalg.solve(A0, -(ev.q0 * (r0_2 * r0_2)[:, None])[..., None])[..., 0]

    Ai = _distortion_jacobians(ev.qi, k1, k2)
    ri_2 = np.sum(ev.qi * ev.qi, axis=-1)
    dqi_df = np.linalg.solve(Ai, -ev.x_di[..., None] / f)[..., 0]
    dqi_dk1 = np.linalg.solve(Ai, -(ev.qi * ri_2[..., None])[..., None])[..., 0]
    dqi_dk2 = np.linalg.solve(Ai, -(ev.qi * (ri_2 * ri_2)[..., None])[..., None])[..., 0]

    def dP_from(dq: np.ndarray) -> np.ndarray:
        out = np.zeros((m, 3))
        out[:, :2] = dq / om[:, None]
        return out

    dX_df = np.einsum("nij,mj->nmi", ev.Rm, dP_from(dq0_df))
    dX_dk1 = np.einsum("nij,mj->nmi", ev.Rm, dP_from(dq0_dk1))
    dX_dk2 = np.einsum("nij,mj->nmi", ev.Rm, dP_from(dq0_dk2))
    dX_dom = -(ev.X - ev.ts[:, None, :]) / om[None, :, None]

    def through_pi(dX: np.ndarray) -> np.ndarray:
        return np.einsum("nmij,nmj->nmi", ev.dpi, dX)

    Jf = (ev.qi - ev.pi) + f * (dqi_df - through_pi(dX_df))
    Jk1 = f * (dqi_dk1 - through_pi(dX_dk1))
    Jk2 = f * (dqi_dk2 - through_pi(dX_dk2))
    Jom = -f * through_pi(dX_dom)
    Jt = -f * ev.dpi
    Jth = np.empty((n, m, 2, 3))
    for i in range(n):
        dX_dth = rotate_points_jacobian(state.poses[i].rotation.axis_angle, ev.P)
        Jth[i] = -f * np.einsum("mij,mjk->mik", ev.dpi[i], dX_dth)
    return Jf, Jk1, Jk2, Jth, Jt, Jom


def jacobian(state: BAState, tracks: TrackTable) -> sp.csr_matrix:
    """Residual-major sparse Jacobian of all non-reference residuals.

    Rows follow (frame, point, component) ordering; columns follow the packed
    parameter vector. The pinned gauge inverse depth has no column, and the
    residuals of frame i carry exact zeros against every other frame's pose.
    """
    ev = _evaluate(state, tracks)
    _check_valid(ev, tracks, state)
    Jf, Jk1, Jk2, Jth, Jt, Jom = _jacobian_blocks(state, tracks, ev)
    n, m = tracks.n_frames, tracks.m_points
    n_rows = 2 * n * m
    rows = np.arange(n_rows)
    i_of_row = rows // (2 * m)
    j_of_row = (rows // 2) % m

    data = []
    rr = []
    cc = []
    for col, block in ((0, Jf), (1, Jk1), (2, Jk2)):
        rr.append(rows)
        cc.append(np.full(n_rows, col))
        data.append(block.reshape(-1))
    pose_block = np.concatenate([Jth, Jt], axis=-1).reshape(n_rows, 6)
    pose_cols = 3 + 6 * i_of_row[:, None] + np.arange(6)[None, :]
    rr.append(np.repeat(rows, 6))
    cc.append(pose_cols.reshape(-1))
    data.append(pose_block.reshape(-1))
    om_cols = _omega_columns(m, state.gauge_point, 3 + 6 * n)
    keep = j_of_row != state.gauge_point
    rr.append(rows[keep])
    cc.append(om_cols[j_of_row[keep]])
    data.append(Jom.reshape(-1)[keep])

    J = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rr), np.concatenate(cc))),
        shape=(n_rows, state.n_params),
    )
    return J


def _pack(state: BAState) -> np.ndarray:
    parts = [np.array([state.focal, state.k1, state.k2])]
    for pose in state.poses:
        parts.append(pose.rotation.axis_angle)
        parts.append(pose.translation)
    parts.append(np.delete(state.omegas, state.gauge_point))
    return np.concatenate(parts)


def _unpack(vec: np.ndarray, template: BAState) -> BAState:
    n = template.n_frames
    m = template.m_points
    focal, k1, k2 = vec[0], vec[1], vec[2]
    poses = []
    for i in range(n):
        base = 3 + 6 * i
        poses.append(Pose(so3_exp(vec[base : base + 3]), vec[base + 3 : base + 6]))
    omegas = np.empty(m)
    free = vec[3 + 6 * n :]
    g = template.gauge_point
    omegas[:g] = free[:g]
    omegas[g] = template.omegas[g]
    omegas[g + 1 :] = free[g:]
    return BAState(float(focal), float(k1), float(k2), poses, omegas, g)


def _clamp_vec(vec: np.ndarray, template: BAState, f0: float) -> np.ndarray:
    out = vec.copy()
    out[0] = np.clip(out[0], FOCAL_SPAN[0] * f0, FOCAL_SPAN[1] * f0)
    out[1] = np.clip(out[1], -2.0, 2.0)
    out[2] = np.clip(out[2], -2.0, 2.0)
    n = template.n_frames
    out[3 + 6 * n :] = np.maximum(out[3 + 6 * n :], OMEGA_MIN)
    return out


def _try_cost(state: BAState, tracks: TrackTable, delta: float) -> float:
    """Huber cost, or +inf when the state is geometrically invalid."""
    ev = _evaluate(state, tracks)
    if not np.all(ev.ok):
        return np.inf
    return _huber_total(ev.r, delta)


def solve(
    init: BAState, tracks: TrackTable, opts: BAOptions | None = None
) -> tuple[BAState, BAReport]:
    """Levenberg-Marquardt refinement of the full parameter vector.

    Damping is multiplied by 10 on rejected steps and divided by 3 on accepted
    ones; convergence is declared when the relative cost decrease of an
    accepted step falls below ``ftol`` or the step norm falls below ``xtol``.
    Raises NumericalFailure when the damped normal equations stay unsolvable
    at damping beyond 1e8.
    """
    opts = opts or BAOptions()
    t0 = time.perf_counter()
    f0 = init.focal
    p = _clamp_vec(_pack(init), init, f0)
    state = _unpack(p, init)
    cost = _try_cost(state, tracks, opts.delta)
    if not np.isfinite(cost):
        _check_valid(_evaluate(state, tracks), tracks, state)  # raises with cause
    trace = [cost]
    lam = opts.lambda0
    converged = False
    iterations = 0

    while iterations < opts.max_iter and not converged:
        iterations += 1
        ev = _evaluate(state, tracks)
        J = jacobian(state, tracks)
        w = np.repeat(_huber_weights(ev.r, opts.delta).reshape(-1), 2)
        sw = np.sqrt(w)
        Jw = sp.diags(sw) @ J
        rw = sw * ev.r.reshape(-1)
        H = (Jw.T @ Jw).toarray()
        g = Jw.T @ rw
        dscale = np.maximum(np.diag(H), 1e-12)

        accepted = False
        for _ in range(80):  # damping escalations within one iteration
            try:
                L = np.linalg.cholesky(H + lam * np.diag(dscale))
                step = -np.linalg.solve(L.T, np.linalg.solve(L, g))
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                lam *= 10.0
                if lam > 1e8:
                    raise NumericalFailure(
                        f"normal equations unsolvable at damping {lam:.1e}"
                    )
                continue
            if np.linalg.norm(step) < opts.xtol:
                converged = True
                break
            cand_vec = _clamp_vec(p + step, state, f0)
            cand_state = _unpack(cand_vec, state)
            cand_cost = _try_cost(cand_state, tracks, opts.delta)
            if cand_cost < cost:
                rel_drop = (cost - cand_cost) / cost if cost > 0 else 0.0
                p = cand_vec
                state = cand_state
                cost = cand_cost
                trace.append(cost)
                lam /= 3.0
                accepted = True
                if rel_drop < opts.ftol:
                    converged = True
                break
            lam *= 10.0
        if not accepted and not converged:
            break  # damping exhausted without progress

    report = BAReport(
        iterations=iterations,
        converged=converged,
        initial_cost=trace[0],
        final_cost=trace[-1],
        cost_trace=trace,
        wall_time=time.perf_counter() - t0,
    )
    return state, report
