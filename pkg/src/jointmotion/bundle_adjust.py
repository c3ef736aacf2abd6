"""Pose-only bundle adjustment.

Levenberg-Marquardt over camera poses with world points held fixed,
analytic Jacobians, a Huber robust loss on normalized reprojection
residuals, and soft per-observation weights. Each pose contributes a
6-dim tangent (rotation vector, camera-frame translation delta), plus an
optional focal column.

Damping uses the Fletcher form H + lambda * diag(H) (with an absolute
floor on the diagonal), which makes the step exactly invariant under a
uniform scaling of all observation weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientObservations, NumericalFailure, ShapeMismatch
from .geometry import (
    BEHIND_CAMERA_EPS,
    CameraPose,
    quat_from_rotvec,
    quat_multiply,
    quat_rotate,
)

log = logging.getLogger(__name__)

# Observations at or below this weight do not count as frame support.
SUPPORT_WEIGHT_EPS = 1e-6

# Robust cost below this is numerically zero; the solver stops.
COST_FLOOR = 1e-24

# Per-unit-weight cost charged to an observation a trial step pushes
# behind the camera; large enough that such steps are always rejected.
BEHIND_PENALTY = 1e6

_DAMPING_MAX = 1e12
_DIAG_FLOOR = 1e-12


@dataclass(frozen=True)
class Observations:
    """Sparse (frame, point) -> normalized uv measurements with weights."""

    frame: np.ndarray  # (M,) int
    point: np.ndarray  # (M,) int
    uv: np.ndarray  # (M, 2)
    weight: np.ndarray  # (M,)

    def __post_init__(self):
        f = np.array(self.frame, dtype=int)
        p = np.array(self.point, dtype=int)
        uv = np.array(self.uv, dtype=float)
        w = np.array(self.weight, dtype=float)
        m = f.shape[0]
        if p.shape != (m,) or uv.shape != (m, 2) or w.shape != (m,):
            raise ShapeMismatch("observation arrays disagree on length")
        if np.any(w < 0):
            raise ValueError("observation weights must be non-negative")
        for a in (f, p, uv, w):
            a.setflags(write=False)
        object.__setattr__(self, "frame", f)
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "weight", w)

    def __len__(self) -> int:
        return self.frame.shape[0]


@dataclass(frozen=True)
class BAProblem:
    """World points (fixed), observations, and initial poses."""

    world_points: np.ndarray  # (N, 3)
    observations: Observations
    poses: tuple[CameraPose, ...]

    def __post_init__(self):
        pts = np.array(self.world_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"world_points must be (N, 3), got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "world_points", pts)
        object.__setattr__(self, "poses", tuple(self.poses))
        obs = self.observations
        if len(obs) and (obs.frame.min() < 0 or obs.frame.max() >= len(self.poses)):
            raise ShapeMismatch("observation frame index out of range")
        if len(obs) and (obs.point.min() < 0 or obs.point.max() >= pts.shape[0]):
            raise ShapeMismatch("observation point index out of range")


@dataclass(frozen=True)
class BAOptions:
    max_iterations: int = 30
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    convergence_tol: float = 1e-9
    huber_delta: float = 0.01
    optimize_focal: bool = False
    fix_first_pose: bool = False
    min_observations: int = 4


@dataclass(frozen=True)
class BAReport:
    """Solver trace: robust cost per accepted state, final fit quality.

    ``cost_history`` covers the optimized frames only (frozen frames add a
    constant), so it is non-increasing across accepted steps by
    construction. ``final_rmse`` is the plain weighted RMSE over every
    usable observation, frozen frames included.
    """

    cost_history: tuple[float, ...]
    final_rmse: float
    frozen_frames: tuple[int, ...]
    iterations_used: int
    converged: bool


def retract_pose(pose: CameraPose, delta: np.ndarray) -> CameraPose:
    """Apply a tangent step [rotvec, camera-frame dt, (df)] to a pose."""
    delta = np.asarray(delta, dtype=float)
    q = quat_multiply(pose.rotation, quat_from_rotvec(delta[:3]))
    t = pose.translation + quat_rotate(pose.rotation, delta[3:6])
    focal = pose.focal + (float(delta[6]) if delta.shape[0] > 6 else 0.0)
    return CameraPose(q, t, focal, pose.principal_point)


def projection_residual(pose: CameraPose, point_world: np.ndarray, uv_obs: np.ndarray) -> np.ndarray:
    """Reprojection residual proj(point) - uv_obs in normalized units."""
    p_cam = pose.inverse_transform(np.asarray(point_world, dtype=float))
    z = p_cam[2]
    return pose.focal * p_cam[:2] / z + pose.principal_point - np.asarray(uv_obs, dtype=float)


def projection_jacobian(pose: CameraPose, point_world: np.ndarray, optimize_focal: bool = False) -> np.ndarray:
    """Analytic d(projection)/d(tangent) at delta = 0.

    Columns follow the retract_pose parameter order: rotation vector,
    camera-frame translation delta, and (optionally) focal. Shape (2, 6)
    or (2, 7).
    """
    p_cam = pose.inverse_transform(np.asarray(point_world, dtype=float))
    x, y, z = p_cam
    f = pose.focal
    # d(uv)/d(p_cam)
    A = np.array([[f / z, 0.0, -f * x / z**2], [0.0, f / z, -f * y / z**2]])
    # d(p_cam)/d(rotvec) = [p_cam]_x ; d(p_cam)/d(dt) = -I
    skew = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    J = np.hstack([A @ skew, -A])
    if optimize_focal:
        J = np.hstack([J, np.array([[x / z], [y / z]])])
    return J


def _huber_rho(r: np.ndarray, delta: float) -> np.ndarray:
    """Huber loss on residual norms; quadratic core, linear tails."""
    return np.where(r <= delta, r * r, delta * (2.0 * r - delta))


def _huber_irls(r: np.ndarray, delta: float) -> np.ndarray:
    """IRLS multiplier rho'(r) / (2r); 1 in the core, delta/r in the tails."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))


def _frame_cost(pose: CameraPose, pts: np.ndarray, uv: np.ndarray, w: np.ndarray, huber_delta: float) -> float:
    p_cam = pose.inverse_transform(pts)
    z = p_cam[:, 2]
    front = z > BEHIND_CAMERA_EPS
    zs = np.where(front, z, 1.0)
    proj = pose.focal * p_cam[:, :2] / zs[:, None] + pose.principal_point
    e = proj - uv
    r = np.linalg.norm(e, axis=1)
    rho = np.where(front, _huber_rho(r, huber_delta), BEHIND_PENALTY)
    return float((w * rho).sum())


def _frame_system(pose: CameraPose, pts: np.ndarray, uv: np.ndarray, w: np.ndarray, opts: BAOptions):
    """Gauss-Newton block (H, g) for one frame at the current pose."""
    p_cam = pose.inverse_transform(pts)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    f = pose.focal
    proj = np.stack([f * x / z + pose.principal_point[0], f * y / z + pose.principal_point[1]], axis=1)
    e = proj - uv
    r = np.linalg.norm(e, axis=1)
    w_eff = w * _huber_irls(r, opts.huber_delta)

    m = pts.shape[0]
    dim = 7 if opts.optimize_focal else 6
    A = np.zeros((m, 2, 3))
    A[:, 0, 0] = f / z
    A[:, 0, 2] = -f * x / z**2
    A[:, 1, 1] = f / z
    A[:, 1, 2] = -f * y / z**2
    skew = np.zeros((m, 3, 3))
    skew[:, 0, 1] = -z
    skew[:, 0, 2] = y
    skew[:, 1, 0] = z
    skew[:, 1, 2] = -x
    skew[:, 2, 0] = -y
    skew[:, 2, 1] = x
    J = np.empty((m, 2, dim))
    J[:, :, :3] = np.einsum("mij,mjk->mik", A, skew)
    J[:, :, 3:6] = -A
    if opts.optimize_focal:
        J[:, 0, 6] = x / z
        J[:, 1, 6] = y / z

    Jw = J * w_eff[:, None, None]
    H = np.einsum("mai,maj->ij", Jw, J)
    g = np.einsum("mai,ma->i", Jw, e)
    return H, g


def _cholesky_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(A)
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def reprojection_rmse(
    poses: list[CameraPose] | tuple[CameraPose, ...],
    world_points: np.ndarray,
    observations: Observations,
) -> float:
    """Weighted root-mean-square reprojection error in normalized units.

    sqrt(sum_i w_i ||proj - uv||^2 / sum_i w_i) over observations in front
    of their camera; behind-camera observations are dropped. Returns 0.0
    when no weight remains.
    """
    world_points = np.asarray(world_points, dtype=float)
    num = 0.0
    den = 0.0
    for t in np.unique(observations.frame):
        idx = np.nonzero(observations.frame == t)[0]
        pose = poses[t]
        pts = world_points[observations.point[idx]]
        p_cam = pose.inverse_transform(pts)
        z = p_cam[:, 2]
        front = z > BEHIND_CAMERA_EPS
        if not np.any(front):
            continue
        proj = pose.focal * p_cam[front, :2] / z[front, None] + pose.principal_point
        e = proj - observations.uv[idx][front]
        w = observations.weight[idx][front]
        num += float((w * (e * e).sum(axis=1)).sum())
        den += float(w.sum())
    if den <= 0:
        log.warning("reprojection_rmse: zero total weight, returning 0")
        return 0.0
    return float(np.sqrt(num / den))


def solve_ba(problem: BAProblem, options: BAOptions | None = None) -> tuple[list[CameraPose], BAReport]:
    """Refine camera poses against fixed world points.

    Returns (refined poses, report). Frames with fewer than
    ``options.min_observations`` usable observations (weight above 1e-6
    and in front of the initial camera) are frozen at their initial pose
    and listed in the report. Raises InsufficientObservations when no
    frame can be optimized and NumericalFailure when the initial cost is
    not finite; in both cases the caller's poses are untouched.
    """
    opts = options or BAOptions()
    obs = problem.observations
    poses = list(problem.poses)
    T = len(poses)
    dim = 7 if opts.optimize_focal else 6

    # Usable observations: enough weight and in front of the initial camera.
    z_init = np.empty(len(obs))
    for t in range(T):
        idx = np.nonzero(obs.frame == t)[0]
        if idx.size:
            z_init[idx] = poses[t].inverse_transform(problem.world_points[obs.point[idx]])[:, 2]
    active = (obs.weight > SUPPORT_WEIGHT_EPS) & (z_init > BEHIND_CAMERA_EPS)

    support = np.bincount(obs.frame[active], minlength=T)
    frozen = support < opts.min_observations
    frozen_frames = tuple(int(t) for t in np.nonzero(frozen)[0])
    free = ~frozen
    if opts.fix_first_pose and T > 0:
        free[0] = False
    free_frames = [t for t in range(T) if free[t]]
    if not free_frames:
        raise InsufficientObservations(
            f"no frame has >= {opts.min_observations} usable observations"
        )

    # Per-free-frame observation slices, fixed for the whole solve.
    frame_data = {}
    for t in free_frames:
        idx = np.nonzero(active & (obs.frame == t))[0]
        frame_data[t] = (
            problem.world_points[obs.point[idx]],
            obs.uv[idx],
            obs.weight[idx],
        )

    def total_cost(candidate: list[CameraPose]) -> float:
        return sum(
            _frame_cost(candidate[t], *frame_data[t], opts.huber_delta) for t in free_frames
        )

    cost = total_cost(poses)
    if not np.isfinite(cost):
        raise NumericalFailure(f"initial robust cost is not finite: {cost}")
    cost_history = [cost]
    lam = opts.initial_damping
    iterations = 0
    converged = cost <= COST_FLOOR

    while iterations < opts.max_iterations and not converged:
        n_free = len(free_frames)
        H = np.zeros((dim * n_free, dim * n_free))
        g = np.zeros(dim * n_free)
        for k, t in enumerate(free_frames):
            Hf, gf = _frame_system(poses[t], *frame_data[t], opts)
            sl = slice(dim * k, dim * (k + 1))
            H[sl, sl] = Hf
            g[sl] = gf
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
            raise NumericalFailure("normal equations contain non-finite entries")
        if float(np.abs(g).max()) < 1e-14:
            converged = True
            break

        diag = np.maximum(np.diag(H), _DIAG_FLOOR)
        accepted = False
        while lam <= _DAMPING_MAX:
            try:
                delta = _cholesky_solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= opts.damping_up
                continue
            trial = list(poses)
            try:
                for k, t in enumerate(free_frames):
                    trial[t] = retract_pose(poses[t], delta[dim * k : dim * (k + 1)])
                trial_cost = total_cost(trial)
            except ValueError:  # focal stepped non-positive
                trial_cost = np.inf
            if np.isfinite(trial_cost) and trial_cost < cost:
                poses = trial
                prev = cost
                cost = trial_cost
                cost_history.append(cost)
                iterations += 1
                lam = max(lam * opts.damping_down, 1e-15)
                accepted = True
                if cost <= COST_FLOOR or (prev - cost) <= opts.convergence_tol * max(prev, 1e-300):
                    converged = True
                break
            lam *= opts.damping_up
        if not accepted:
            # Damping exhausted without a downhill step: local stall.
            log.debug("solve_ba stalled at cost %.3e after %d iterations", cost, iterations)
            break

    kept = np.nonzero(active)[0]
    final_rmse = reprojection_rmse(
        poses,
        problem.world_points,
        Observations(obs.frame[kept], obs.point[kept], obs.uv[kept], obs.weight[kept]),
    ) if kept.size else 0.0
    report = BAReport(
        cost_history=tuple(cost_history),
        final_rmse=final_rmse,
        frozen_frames=frozen_frames,
        iterations_used=iterations,
        converged=converged,
    )
    return poses, report
