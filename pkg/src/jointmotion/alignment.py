"""Closed-form registration and fusion.

Weighted rigid (Kabsch) and similarity (Umeyama) alignment between point
sets, the affine depth fit, and the per-query fusion of aligned tracks
into world points. All solvers are exact least-squares solutions, not
iterative refinements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, EmptyInput, ShapeMismatch
from .geometry import ScaleShift, matrix_to_quat

# Weights at or below this contribute nothing and do not count as support.
WEIGHT_EPS = 1e-12

# Relative singular-value threshold for "effectively rank < 2" inputs.
RANK_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation, x -> R x + t."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("rigid transform needs (3,3) rotation and (3,) translation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)


@dataclass(frozen=True)
class SimilarityTransform:
    """Scaled rigid transform, x -> s R x + t, s > 0."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("similarity transform needs (3,3) rotation and (3,) translation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) @ self.rotation.T) + self.translation


def _check_point_pair(src, dst) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3:
        raise ShapeMismatch(f"src must be (N, 3), got {src.shape}")
    if src.shape != dst.shape:
        raise ShapeMismatch(f"src {src.shape} and dst {dst.shape} differ")
    if src.shape[0] == 0:
        raise EmptyInput("no points to align")
    return src, dst


def weighted_procrustes(src: np.ndarray, dst: np.ndarray, weights=None) -> RigidTransform:
    """Best rigid transform mapping src to dst under per-point weights.

    Minimizes sum_i w_i ||R s_i + t - d_i||^2 in closed form: weighted
    centroids, SVD of the weighted cross-covariance, and a determinant
    correction that flips the last singular direction when the unconstrained
    optimum would be a reflection, so the result is always a proper rotation.

    Points with weight <= 1e-12 have no influence at all. Raises
    DegenerateInput when fewer than 3 points carry weight or the weighted
    cloud is effectively collinear (second singular value vanishes), since
    the rotation is not unique there.
    """
    src, dst = _check_point_pair(src, dst)
    n = src.shape[0]
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ShapeMismatch(f"weights must be ({n},), got {w.shape}")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
    support = w > WEIGHT_EPS
    if np.count_nonzero(support) < 3:
        raise DegenerateInput(f"only {np.count_nonzero(support)} points carry weight, need >= 3")
    wsum = float(w[support].sum())

    w_eff = np.where(support, w, 0.0)
    mu_s = (w_eff[:, None] * src).sum(axis=0) / wsum
    mu_d = (w_eff[:, None] * dst).sum(axis=0) / wsum
    cs = src - mu_s
    cd = dst - mu_d
    H = (w_eff[:, None] * cs).T @ cd  # 3x3 weighted cross-covariance

    U, S, Vt = np.linalg.svd(H)
    if S[1] <= RANK_TOL * max(S[0], 1e-300):
        raise DegenerateInput("weighted point cloud is rank-deficient (collinear or coincident)")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        raise DegenerateInput("cross-covariance determinant is exactly zero")
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_d - R @ mu_s
    return RigidTransform(R, t)


def umeyama_sim3(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Best similarity transform (s, R, t) mapping src to dst.

    Closed-form least squares: the rotation comes from the SVD of the
    cross-covariance with the same determinant correction as the rigid
    case, and the scale is the variance ratio trace(D S) / var(src).
    Raises DegenerateInput for effectively collinear or coincident input.
    """
    src, dst = _check_point_pair(src, dst)
    n = src.shape[0]
    if n < 3:
        raise DegenerateInput(f"need >= 3 points for a unique similarity, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    var_s = float((cs * cs).sum()) / n
    H = cd.T @ cs / n

    U, S, Vt = np.linalg.svd(H)
    if S[1] <= RANK_TOL * max(S[0], 1e-300) or var_s <= 0:
        raise DegenerateInput("point cloud is rank-deficient (collinear or coincident)")
    sign = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    corr = np.ones(3)
    corr[2] = sign if sign != 0 else 1.0
    R = U @ np.diag(corr) @ Vt
    scale = float((S * corr).sum()) / var_s
    if scale <= 0:
        raise DegenerateInput(f"similarity fit produced non-positive scale {scale}")
    t = mu_d - scale * (R @ mu_s)
    return SimilarityTransform(scale, R, t)


def fit_scale_shift(pred: np.ndarray, gt: np.ndarray, mask=None) -> tuple[ScaleShift, bool]:
    """Least-squares affine depth fit gt ~ a * pred + b over masked entries.

    Returns (ScaleShift, clamped). When the unconstrained optimum has
    a <= 0, the scale is clamped to 1e-6, b is refit for that scale, and
    clamped is True. Raises DegenerateInput when all masked predictions
    are equal (the normal equations are singular) and EmptyInput when the
    mask keeps nothing.
    """
    pred = np.asarray(pred, dtype=float).ravel()
    gt = np.asarray(gt, dtype=float).ravel()
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} and gt {gt.shape} differ")
    if mask is None:
        m = np.ones(pred.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool).ravel()
        if m.shape != pred.shape:
            raise ShapeMismatch(f"mask {m.shape} does not match data {pred.shape}")
    p = pred[m]
    g = gt[m]
    if p.size == 0:
        raise EmptyInput("mask keeps no pixels")
    if np.ptp(p) == 0.0:
        raise DegenerateInput("all masked predictions are equal; scale is unobservable")

    n = float(p.size)
    sp = p.sum()
    spp = float(p @ p)
    sg = g.sum()
    spg = float(p @ g)
    det = spp * n - sp * sp
    if det <= 0:
        raise DegenerateInput("normal equations are singular")
    a = (spg * n - sp * sg) / det
    b = (spp * sg - sp * spg) / det
    if a <= 0:
        a = 1e-6
        b = float((g - a * p).mean())
        return ScaleShift(a, b), True
    return ScaleShift(a, b), False


@dataclass(frozen=True)
class FusedPoints:
    """Per-query world points with dynamic/static classification.

    ``points`` holds the visibility-weighted mean of the aligned per-frame
    positions for every query (dynamic ones included, as a representative
    location). ``static_mask`` is False where the mean dynamic probability
    reached the threshold; those queries keep their per-frame world tracks
    and stay out of bundle adjustment. ``low_confidence`` flags queries
    whose visibility weights summed to zero, where an unweighted mean was
    used instead.
    """

    points: np.ndarray  # (N, 3)
    static_mask: np.ndarray  # (N,) bool
    low_confidence: np.ndarray  # (N,) bool


def fuse_world_points(
    tracks3d_world: np.ndarray,
    p_dyn: np.ndarray,
    p_vis: np.ndarray,
    dyn_threshold: float = 0.5,
) -> FusedPoints:
    """Collapse aligned world tracks (T, N, 3) into one point per query.

    A query is static when its mean dynamic probability over frames is
    strictly below ``dyn_threshold``; its fused point is the p_vis-weighted
    mean over frames. Queries with zero total visibility weight fall back
    to the unweighted mean and are flagged low-confidence.
    """
    tracks3d_world = np.asarray(tracks3d_world, dtype=float)
    p_dyn = np.asarray(p_dyn, dtype=float)
    p_vis = np.asarray(p_vis, dtype=float)
    if tracks3d_world.ndim != 3 or tracks3d_world.shape[2] != 3:
        raise ShapeMismatch(f"tracks must be (T, N, 3), got {tracks3d_world.shape}")
    T, N = tracks3d_world.shape[:2]
    if p_dyn.shape != (T, N) or p_vis.shape != (T, N):
        raise ShapeMismatch("probability arrays must be (T, N)")
    if T == 0 or N == 0:
        raise EmptyInput("no tracks to fuse")

    wsum = p_vis.sum(axis=0)  # (N,)
    low_confidence = wsum <= 0
    safe_wsum = np.where(low_confidence, 1.0, wsum)
    weighted = (p_vis[:, :, None] * tracks3d_world).sum(axis=0) / safe_wsum[:, None]
    unweighted = tracks3d_world.mean(axis=0)
    points = np.where(low_confidence[:, None], unweighted, weighted)
    static_mask = p_dyn.mean(axis=0) < dyn_threshold
    return FusedPoints(points, static_mask, low_confidence)
