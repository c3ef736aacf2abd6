"""Iterative joint refinement of tracks, probabilities, and camera poses.

The loop keeps one TrackState and repeats a fixed step: a pluggable
updater proposes deltas for the 2D/3D tracks and the dynamic/visibility
logits; per-frame weighted Procrustes re-registers the camera-frame
tracks against the current world points and the results are adopted as
the new poses; the world points are re-fused with dynamic filtering;
bundle adjustment refines the poses against the static subset; and the
motion anchors are recomputed from the refined poses for the next step.

Any Procrustes or BA failure freezes the affected quantity for that
iteration and is noted in the step record instead of aborting the run.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .alignment import fuse_world_points, weighted_procrustes
from .bundle_adjust import (
    BAOptions,
    BAProblem,
    BAReport,
    Observations,
    reprojection_rmse,
    solve_ba,
)
from .correlation import (
    DEFAULT_DELTA,
    DEFAULT_NUM_LEVELS,
    FeaturePyramid,
    anchor_points,
    bilinear_sample,
    build_pyramid,
    level_grid_coords,
    level_grid_uv,
    sample_descriptors,
)
from .errors import (
    DegenerateInput,
    InsufficientObservations,
    NumericalFailure,
    ShapeMismatch,
)
from .geometry import (
    BEHIND_CAMERA_EPS,
    CameraPose,
    DepthMap,
    ScaleShift,
    apply_scale_shift,
    camera_tracks_to_world,
    ego_motion_tracks,
    query_pixel_indices,
    unproject,
)

logger = logging.getLogger(__name__)

# Probabilities are clipped into [LOGIT_EPS, 1 - LOGIT_EPS] before logit
# conversion, bounding logits near +-30 and keeping sigmoid(logit(p))
# within 1e-13 of p.
LOGIT_EPS = 1e-13


def probability_to_logit(p: np.ndarray) -> np.ndarray:
    """log(p / (1 - p)) with clipping that keeps the round trip tight."""
    p = np.clip(np.asarray(p, dtype=float), LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(p) - np.log1p(-p)


def logit_to_probability(logit: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid."""
    logit = np.asarray(logit, dtype=float)
    out = np.empty_like(logit)
    pos = logit >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logit[pos]))
    e = np.exp(logit[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# State.


@dataclass(frozen=True)
class TrackState:
    """All per-iteration track quantities plus the camera poses.

    tracks2d holds normalized image coordinates, tracks3d camera-frame
    points, p_dyn/p_vis probabilities in [0, 1]. The query-frame rows are
    pinned by construction: tracks2d[query_frame] is reset to the query
    pixels and p_vis[query_frame] to 1, so the pinning invariant holds at
    every iteration no matter what a caller passes in. world_points and
    static_mask carry the current fused interpretation of the tracks;
    rows of tracks2d whose projection was invalid hold the query pixel
    as a finite placeholder (their p_vis is 0 or decays there).
    """

    tracks2d: np.ndarray  # (T, N, 2)
    tracks3d: np.ndarray  # (T, N, 3)
    p_dyn: np.ndarray  # (T, N)
    p_vis: np.ndarray  # (T, N)
    poses: tuple[CameraPose, ...]
    iteration: int
    queries: np.ndarray  # (N, 2)
    query_frame: int
    world_points: np.ndarray  # (N, 3)
    static_mask: np.ndarray  # (N,) bool

    def __post_init__(self):
        queries = np.atleast_2d(np.asarray(self.queries, dtype=float))
        n = queries.shape[0]
        t = len(self.poses)
        if queries.shape != (n, 2):
            raise ShapeMismatch(f"queries must be (N, 2), got {queries.shape}")
        if t == 0:
            raise ShapeMismatch("at least one pose required")
        if not 0 <= self.query_frame < t:
            raise ShapeMismatch(f"query_frame {self.query_frame} outside 0..{t - 1}")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

        t2 = np.array(self.tracks2d, dtype=float)
        t3 = np.array(self.tracks3d, dtype=float)
        pd = np.array(self.p_dyn, dtype=float)
        pv = np.array(self.p_vis, dtype=float)
        wp = np.array(self.world_points, dtype=float)
        sm = np.array(self.static_mask, dtype=bool)
        if t2.shape != (t, n, 2):
            raise ShapeMismatch(f"tracks2d must be ({t}, {n}, 2), got {t2.shape}")
        if t3.shape != (t, n, 3):
            raise ShapeMismatch(f"tracks3d must be ({t}, {n}, 3), got {t3.shape}")
        if pd.shape != (t, n) or pv.shape != (t, n):
            raise ShapeMismatch("p_dyn and p_vis must be (T, N)")
        if wp.shape != (n, 3):
            raise ShapeMismatch(f"world_points must be ({n}, 3), got {wp.shape}")
        if sm.shape != (n,):
            raise ShapeMismatch(f"static_mask must be ({n},), got {sm.shape}")
        for name, arr in (("tracks2d", t2), ("tracks3d", t3), ("world_points", wp)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        for name, arr in (("p_dyn", pd), ("p_vis", pv)):
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

        t2[self.query_frame] = queries
        pv[self.query_frame] = 1.0

        object.__setattr__(self, "tracks2d", _frozen(t2))
        object.__setattr__(self, "tracks3d", _frozen(t3))
        object.__setattr__(self, "p_dyn", _frozen(pd))
        object.__setattr__(self, "p_vis", _frozen(pv))
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "queries", _frozen(queries))
        object.__setattr__(self, "world_points", _frozen(wp))
        object.__setattr__(self, "static_mask", _frozen(sm))

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def num_points(self) -> int:
        return self.queries.shape[0]

    def replace(self, **changes) -> "TrackState":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class UpdaterDeltas:
    """Additive state deltas proposed by a track updater.

    Position deltas add to tracks2d/tracks3d; logit deltas add to the
    logits of p_dyn/p_vis before converting back through the sigmoid.
    """

    tracks2d: np.ndarray  # (T, N, 2)
    tracks3d: np.ndarray  # (T, N, 3)
    logit_dyn: np.ndarray  # (T, N)
    logit_vis: np.ndarray  # (T, N)

    def __post_init__(self):
        t2 = np.asarray(self.tracks2d, dtype=float)
        t3 = np.asarray(self.tracks3d, dtype=float)
        ld = np.asarray(self.logit_dyn, dtype=float)
        lv = np.asarray(self.logit_vis, dtype=float)
        if t2.ndim != 3 or t2.shape[2] != 2:
            raise ShapeMismatch(f"tracks2d delta must be (T, N, 2), got {t2.shape}")
        t, n = t2.shape[:2]
        if t3.shape != (t, n, 3) or ld.shape != (t, n) or lv.shape != (t, n):
            raise ShapeMismatch("delta shapes are inconsistent")
        for name, arr in (("tracks2d", t2), ("tracks3d", t3), ("logit_dyn", ld), ("logit_vis", lv)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} delta contains non-finite values")
        object.__setattr__(self, "tracks2d", _frozen(np.array(t2)))
        object.__setattr__(self, "tracks3d", _frozen(np.array(t3)))
        object.__setattr__(self, "logit_dyn", _frozen(np.array(ld)))
        object.__setattr__(self, "logit_vis", _frozen(np.array(lv)))


@dataclass(frozen=True)
class LoopConfig:
    """Iteration counts, cadences, and thresholds for the refinement loop.

    num_iterations may be zero (initialization only). dynamic_filtering
    turns the dynamic gating of Procrustes weights, world-point fusion,
    and BA off when False, for ablation runs.
    """

    num_iterations: int = 8
    procrustes_every: int = 1
    ba_every: int = 1
    dyn_threshold: float = 0.5
    updater_step_scale: float = 1.0
    dynamic_filtering: bool = True

    def __post_init__(self):
        if self.num_iterations < 0:
            raise ValueError("num_iterations must be >= 0")
        if self.procrustes_every < 1 or self.ba_every < 1:
            raise ValueError("cadence counts must be >= 1")
        if not 0.0 < self.dyn_threshold < 1.0:
            raise ValueError("dyn_threshold must lie in (0, 1)")
        if self.updater_step_scale <= 0.0:
            raise ValueError("updater_step_scale must be positive")


class TrackUpdater(Protocol):
    """Interface for pluggable track updaters; must be deterministic."""

    def update(
        self, state: TrackState, features: "FrameFeatures", anchors: np.ndarray
    ) -> UpdaterDeltas: ...


class ZeroDeltaUpdater:
    """Proposes no change; useful for fixed-point and plumbing tests."""

    def update(self, state: TrackState, features: "FrameFeatures", anchors: np.ndarray) -> UpdaterDeltas:
        t, n = state.num_frames, state.num_points
        return UpdaterDeltas(
            tracks2d=np.zeros((t, n, 2)),
            tracks3d=np.zeros((t, n, 3)),
            logit_dyn=np.zeros((t, n)),
            logit_vis=np.zeros((t, n)),
        )


# ---------------------------------------------------------------------------
# Per-frame features shared by all iterations.


@dataclass(frozen=True)
class FrameFeatures:
    """Immutable per-frame pyramids plus the metric depth maps.

    Point pyramids are camera-frame and pose-independent, so one build
    serves every iteration. Image pyramids and the raw intensity images
    travel together and are optional; without them the correlation
    updater falls back to geometric matching.
    """

    depths: tuple[DepthMap, ...]
    point_pyramids: tuple[FeaturePyramid, ...]
    image_pyramids: tuple[FeaturePyramid, ...] | None
    mean_depth: float
    match_images: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "point_pyramids", tuple(self.point_pyramids))
        if self.image_pyramids is not None:
            object.__setattr__(self, "image_pyramids", tuple(self.image_pyramids))
            if len(self.image_pyramids) != len(self.depths):
                raise ShapeMismatch("one image pyramid per frame required")
            if self.match_images is None:
                raise ShapeMismatch("image pyramids require match images alongside")
            object.__setattr__(self, "match_images", tuple(self.match_images))
            if len(self.match_images) != len(self.depths):
                raise ShapeMismatch("one match image per frame required")
        if len(self.point_pyramids) != len(self.depths):
            raise ShapeMismatch("one point pyramid per frame required")
        if not np.isfinite(self.mean_depth) or self.mean_depth <= 0:
            raise ValueError("mean_depth must be positive")

    @property
    def num_frames(self) -> int:
        return len(self.depths)


def build_frame_features(
    depths: list[DepthMap] | tuple[DepthMap, ...],
    poses: list[CameraPose] | tuple[CameraPose, ...],
    images: np.ndarray | None = None,
    num_levels: int = DEFAULT_NUM_LEVELS,
) -> FrameFeatures:
    """Build the per-frame pyramids once for a whole run.

    ``depths`` must already be metric. ``images`` is an optional
    (T, H, W) grayscale stack matching the depth dimensions.
    """
    if len(depths) != len(poses):
        raise ShapeMismatch(f"{len(depths)} depth maps vs {len(poses)} poses")
    point_pyramids = []
    total = 0.0
    count = 0
    for dmap, pose in zip(depths, poses):
        pm, _ = unproject(dmap, pose)
        point_pyramids.append(build_pyramid(pm, num_levels))
        valid = dmap.valid_mask
        total += float(dmap.values[valid].sum())
        count += int(valid.sum())
    if count == 0:
        raise DegenerateInput("no valid depth anywhere; cannot scale features")
    image_pyramids = None
    if images is not None:
        images = np.asarray(images, dtype=float)
        if images.shape != (len(depths), depths[0].height, depths[0].width):
            raise ShapeMismatch(
                f"images must be (T, H, W) = ({len(depths)}, {depths[0].height}, "
                f"{depths[0].width}), got {images.shape}"
            )
        image_pyramids = tuple(build_pyramid(img, num_levels) for img in images)
        match_images = tuple(_gaussian_blur(img, MATCH_BLUR_SIGMA) for img in images)
    else:
        match_images = None
    return FrameFeatures(
        depths=tuple(depths),
        point_pyramids=tuple(point_pyramids),
        image_pyramids=image_pyramids,
        mean_depth=total / count,
        match_images=match_images,
    )


# ---------------------------------------------------------------------------
# Initialization.


def init_state(
    queries: np.ndarray,
    depths: list[DepthMap] | tuple[DepthMap, ...],
    poses: list[CameraPose] | tuple[CameraPose, ...],
    scale_shift: ScaleShift,
    query_frame: int = 0,
) -> TrackState:
    """Ego-motion initialization of the track state.

    Applies the scale/shift calibration to the normalized depths,
    unprojects the queries at the query frame, and re-expresses the
    resulting world points in every frame: the static-world hypothesis.
    tracks2d are the projections (query pixel as placeholder where the
    projection is invalid), p_vis is 1 where the projection lands inside
    the image, p_dyn starts uninformed at 0.5.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    metric = [apply_scale_shift(d, scale_shift)[0] for d in depths]
    tracks3d = ego_motion_tracks(queries, metric, list(poses), query_frame)

    t, n = tracks3d.shape[:2]
    tracks2d = np.tile(queries, (t, 1, 1))
    p_vis = np.zeros((t, n))
    for k, pose in enumerate(poses):
        p = tracks3d[k]
        z = p[:, 2]
        front = z > BEHIND_CAMERA_EPS
        uv = np.where(
            front[:, None],
            pose.focal * p[:, :2] / np.where(front, z, 1.0)[:, None] + np.asarray(pose.principal_point),
            queries,
        )
        inside = front & np.all((uv >= 0.0) & (uv <= 1.0), axis=1)
        tracks2d[k] = np.where(inside[:, None], uv, queries)
        p_vis[k] = inside.astype(float)

    world_points = poses[query_frame].transform(tracks3d[query_frame])
    return TrackState(
        tracks2d=tracks2d,
        tracks3d=tracks3d,
        p_dyn=np.full((t, n), 0.5),
        p_vis=p_vis,
        poses=tuple(poses),
        iteration=0,
        queries=queries,
        query_frame=query_frame,
        world_points=world_points,
        static_mask=np.zeros(n, dtype=bool),
    )


# ---------------------------------------------------------------------------
# The correlation-matching updater.


def _integer_window(pyramid: FeaturePyramid, uv: np.ndarray, deltas):
    """Window samples on each level's own pixel grid, no interpolation.

    ``deltas`` gives the window radius per level. Sites are the
    (2*delta+1)^2 grid cells around the rounded level position of
    ``uv``, clipped to the grid. Returns a list over levels of (values
    (N, K^2, C), positions (N, K^2, 2) normalized, valid (N, K^2)
    bool). Sampling on the grid keeps descriptors exact, which keeps
    the matching landscape sharp.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    out = []
    for level, delta in zip(pyramid.levels, deltas):
        r = np.arange(-delta, delta + 1)
        dc, dr = np.meshgrid(r, r)
        dc = dc.ravel()
        dr = dr.ravel()
        h, w = level.data.shape[:2]
        cr = level_grid_coords(uv, level.scale, pyramid.base_width, pyramid.base_height)
        c0 = np.rint(cr[:, 0]).astype(int)
        r0 = np.rint(cr[:, 1]).astype(int)
        cols = np.clip(c0[:, None] + dc[None, :], 0, w - 1)
        rows = np.clip(r0[:, None] + dr[None, :], 0, h - 1)
        values = level.data[rows, cols]
        positions = level_grid_uv(
            np.stack([cols, rows], axis=-1).astype(float),
            level.scale,
            pyramid.base_width,
            pyramid.base_height,
        )
        if level.valid is None:
            valid = np.ones(cols.shape, dtype=bool)
        else:
            valid = level.valid[rows, cols]
        out.append((values, positions, valid))
    return out


MATCH_BLUR_SIGMA = 0.7


def _gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with reflect padding.

    Patch matching samples one side on the pixel grid and the other at
    fractional warped positions; bilinear interpolation then smooths the
    two sides unequally, which penalizes true matches by a subpixel-
    phase-dependent amount. A common prefilter dominating the
    interpolation kernel makes the comparison shift-invariant.
    """
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = image
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, kv in enumerate(kernel):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def _surface_tangents(depth: DepthMap, queries: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Per-query 3D surface tangents dP/dcol and dP/drow, shape (N, 3, 2).

    P(col, row) = d * ray, so the tangent combines the depth gradient
    along the grid (central differences, shrinking to one-sided at
    borders and invalid neighbors) with the ray direction change per
    pixel. Gradients are clamped to half the center depth per pixel:
    steeper jumps are depth edges, not surface slope.
    """
    vals = depth.values
    h, w = vals.shape
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    rows, cols = query_pixel_indices(queries, w, h)
    d = vals[rows, cols]

    def grid_gradient(rr, cc, axis_rows):
        if axis_rows:
            m_r, m_c = np.clip(rr - 1, 0, h - 1), cc
            p_r, p_c = np.clip(rr + 1, 0, h - 1), cc
            m_pos, p_pos, pos = m_r, p_r, rr
        else:
            m_r, m_c = rr, np.clip(cc - 1, 0, w - 1)
            p_r, p_c = rr, np.clip(cc + 1, 0, w - 1)
            m_pos, p_pos, pos = m_c, p_c, cc
        vm, vp = vals[m_r, m_c], vals[p_r, p_c]
        ok_m, ok_p = vm > 0, vp > 0
        vm = np.where(ok_m, vm, d)
        vp = np.where(ok_p, vp, d)
        span = np.where(ok_p, p_pos, pos) - np.where(ok_m, m_pos, pos)
        g = np.where(span > 0, (vp - vm) / np.maximum(span, 1), 0.0)
        return np.clip(g, -0.5 * d, 0.5 * d)

    gc = grid_gradient(rows, cols, axis_rows=False)
    gr = grid_gradient(rows, cols, axis_rows=True)

    rays = np.concatenate(
        [(queries - pose.principal_point) / pose.focal, np.ones((queries.shape[0], 1))],
        axis=1,
    )
    tangents = np.zeros((queries.shape[0], 3, 2))
    tangents[:, :, 0] = gc[:, None] * rays
    tangents[:, 0, 0] += d / (w * pose.focal)
    tangents[:, :, 1] = gr[:, None] * rays
    tangents[:, 1, 1] += d / (h * pose.focal)
    return tangents


def _normalize_patches(values: np.ndarray) -> np.ndarray:
    """Remove each patch's mean and scale to unit norm (zeros stay zero)."""
    centered = values - values.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(centered, axis=-1, keepdims=True)
    return np.where(norm > 1e-12, centered / np.maximum(norm, 1e-300), 0.0)


def _sample_image(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear image values at normalized positions of any batch shape."""
    h, w = image.shape
    cols = uv[..., 0] * w - 0.5
    rows = uv[..., 1] * h - 0.5
    return bilinear_sample(image[..., None], cols, rows)[..., 0]


@dataclass(frozen=True)
class CorrelationMatchingUpdater:
    """Match each track against pyramid windows and step toward the peak.

    Base-level scoring compares raw-intensity patches warped by the
    local geometry (query-frame depth tangents transported through the
    current pose pair), which keeps true matches sharp across viewpoint
    change; coarser levels compare precomputed pyramid descriptors
    unwarped. Each level's scores are soft-argmaxed inside the dominant
    basin of its offset window, then resolved coarse-to-fine: the finest
    level whose peak clears ``match_threshold`` supplies the target (the
    best-peak level if none does), so coarse levels widen the search
    basin without smearing the localization once a fine match exists.
    After ``refine_after`` iterations only the base level with a narrow
    window is consulted, so settled tracks refine instead of re-locking
    onto distant repeats. The matched window position gives the 2D
    target; the same weights over the point pyramid give the 3D target.
    Without images the score falls back to geometric distance between
    point samples and the current track point. The best peak across
    levels drives the visibility logit; the residual against the motion
    anchors drives the dynamic logit. Out-of-image tracks receive zero
    deltas and a visibility penalty; query-frame rows never receive
    position deltas.
    """

    delta: int = DEFAULT_DELTA
    fine_delta: int = 6
    refine_after: int = 3
    refine_delta: int = 2
    patch_radius: int = 2
    temperature: float = 0.03
    match_threshold: float = 0.7
    distance_prior: float = 0.01
    query_jitter: float = 0.5
    vis_gain: float = 3.0
    vis_floor: float = -0.8
    dyn_gain: float = 1.5
    dyn_rel_scale: float = 0.03
    max_logit_step: float = 4.0
    oob_vis_penalty: float = 2.0

    def __post_init__(self):
        if self.delta < 1 or self.fine_delta < 1 or self.refine_delta < 1:
            raise ValueError("window radii must be >= 1")
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.refine_after < 0:
            raise ValueError("refine_after must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.match_threshold <= 0:
            raise ValueError("match_threshold must be positive")
        if self.distance_prior < 0 or self.query_jitter < 0:
            raise ValueError("distance_prior and query_jitter must be non-negative")
        if self.max_logit_step <= 0:
            raise ValueError("max_logit_step must be positive")

    def _level_deltas(self, num_levels: int, iteration: int) -> list[int]:
        # Capture phase: the base level is the only sharply localizing
        # one, so it gets the wide window and the coarser levels extend
        # the reach. Refinement phase (once the state has had a chance
        # to settle): base level only, narrow window, so a converged
        # track cannot be re-captured by a distant repeated pattern.
        if iteration >= self.refine_after:
            return [self.refine_delta]
        return [self.fine_delta] + [self.delta] * (num_levels - 1)

    def update(self, state: TrackState, features: FrameFeatures, anchors: np.ndarray) -> UpdaterDeltas:
        t, n = state.num_frames, state.num_points
        if features.num_frames != t:
            raise ShapeMismatch(f"features cover {features.num_frames} frames, state has {t}")
        anchors = np.asarray(anchors, dtype=float)
        if anchors.shape != (t, n, 3):
            raise ShapeMismatch(f"anchors must be ({t}, {n}, 3), got {anchors.shape}")

        d2d = np.zeros((t, n, 2))
        d3d = np.zeros((t, n, 3))
        dl_dyn = np.zeros((t, n))
        dl_vis = np.zeros((t, n))
        rho = self.dyn_rel_scale * features.mean_depth

        use_images = features.image_pyramids is not None
        if use_images:
            qf = state.query_frame
            pyr0 = features.image_pyramids[qf]
            query_desc = sample_descriptors(pyr0, state.queries)  # per level (N, C)
            qbase_px = np.array([pyr0.base_width, pyr0.base_height], dtype=float)
            pr = self.patch_radius
            r = np.arange(-pr, pr + 1, dtype=float)
            tc, tr = np.meshgrid(r, r)
            taps = np.stack([tc.ravel(), tr.ravel()], axis=1)  # (P, 2) in base px
            # Base-level matching compares raw-intensity patches under
            # the local warp predicted by the current geometry: the
            # query-frame depth gives surface tangents, the pose pair
            # maps them into the target frame, and the projection of the
            # transported tangents gives the pixel-to-pixel Jacobian.
            # Comparing unwarped patches instead would penalize every
            # true match by the viewpoint change, which biases the score
            # minimum away from the true position.
            pose_q = state.poses[qf]
            rot_q = pose_q.rotation_matrix()
            tangents = _surface_tangents(features.depths[qf], state.queries, pose_q)
            raw_q = features.match_images[qf]
            # The query patch is also tested at a few subpixel shifts;
            # integer window sites never land exactly on the track, and
            # the shifted set absorbs that misalignment.
            j = self.query_jitter
            jit = (-j, 0.0, j) if j > 0 else (0.0,)
            q_offsets = np.array([[dx, dy] for dy in jit for dx in jit])  # (J, 2)
            qpos = (
                state.queries[None, :, None, :]
                + (taps[None, None] + q_offsets[:, None, None, :]) / qbase_px
            )  # (J, N, P, 2)
            q_patches = _normalize_patches(_sample_image(raw_q, qpos))  # (J, N, P)

        for k in range(t):
            uv = state.tracks2d[k]
            inside = np.all((uv >= 0.0) & (uv <= 1.0), axis=1)

            deltas = self._level_deltas(
                len(features.point_pyramids[k].levels), state.iteration
            )
            pt_levels = _integer_window(features.point_pyramids[k], uv, deltas)
            if use_images:
                img_levels = _integer_window(features.image_pyramids[k], uv, deltas)

            num_levels = len(pt_levels)
            level_peak = np.full((n, num_levels), -np.inf)
            level_t2d = np.zeros((n, num_levels, 2))
            level_t3d = np.zeros((n, num_levels, 3))
            level_usable = np.zeros((n, num_levels), dtype=bool)
            pyramid = features.point_pyramids[k]
            base_px = np.array([pyramid.base_width, pyramid.base_height], dtype=float)
            for li in range(num_levels):
                points, positions, valid = pt_levels[li]
                if use_images and li == 0:
                    pose_k = state.poses[k]
                    rot_rel = pose_k.rotation_matrix().T @ rot_q
                    pk = anchors[k]
                    z = np.maximum(pk[:, 2], BEHIND_CAMERA_EPS)
                    f = pose_k.focal
                    proj = np.zeros((n, 2, 3))
                    proj[:, 0, 0] = f / z
                    proj[:, 1, 1] = f / z
                    proj[:, 0, 2] = -f * pk[:, 0] / (z * z)
                    proj[:, 1, 2] = -f * pk[:, 1] / (z * z)
                    jac = np.einsum("nij,jk,nkl->nil", proj, rot_rel, tangents)
                    tap_uv = np.einsum("nil,pl->npi", jac, taps)  # (N, P, 2)
                    pos_taps = positions[:, :, None, :] + tap_uv[:, None, :, :]
                    patches = _normalize_patches(
                        _sample_image(features.match_images[k], pos_taps)
                    )  # (N, S, P)
                    diff = patches[None] - q_patches[:, :, None, :]
                    scores = -np.min(np.sum(diff**2, axis=3), axis=0)
                elif use_images:
                    diff = img_levels[li][0] - query_desc[li][:, None, :]
                    scores = -np.sum(diff**2, axis=2)
                else:
                    diff = points - state.tracks3d[k][:, None, :]
                    scores = -np.sum(diff**2, axis=2) / (rho * rho)
                # Distance prior in each level's own pixels: far sites
                # must beat near ones by a margin, which suppresses
                # repeated-pattern matches without capping the reach of
                # the coarse levels.
                dpx = (positions - uv[:, None, :]) * base_px / pyramid.levels[li].scale
                scores = scores - self.distance_prior * np.sum(dpx**2, axis=2)
                scores = np.where(valid, scores, -np.inf)
                usable_l = valid.any(axis=1)
                best = np.argmax(scores, axis=1)
                peak_l = np.where(usable_l, np.take_along_axis(scores, best[:, None], axis=1)[:, 0], -np.inf)
                # Soft-argmax restricted to the 3x3 site basin around the
                # peak. A window this wide is multi-modal for repetitive
                # texture; averaging across basins drags the target
                # between peaks, while the dominant basin alone gives a
                # clean subpixel estimate.
                kk = 2 * deltas[li] + 1
                site = np.arange(kk * kk)
                site_dc = site % kk
                site_dr = site // kk
                basin = (
                    (np.abs(site_dc[None, :] - site_dc[best][:, None]) <= 1)
                    & (np.abs(site_dr[None, :] - site_dr[best][:, None]) <= 1)
                )
                w = np.exp((scores - np.where(usable_l, peak_l, 0.0)[:, None]) / self.temperature)
                w = np.where(valid & basin, w, 0.0)
                wsum = np.maximum(w.sum(axis=1), 1e-300)
                w = w / wsum[:, None]
                level_peak[:, li] = peak_l
                level_t2d[:, li] = np.einsum("ns,nsc->nc", w, positions)
                level_t3d[:, li] = np.einsum("ns,nsc->nc", w, points)
                level_usable[:, li] = usable_l

            usable = level_usable.any(axis=1)
            confident = level_usable & (level_peak >= -self.match_threshold)
            # Finest confident level, or the best peak when none clears it.
            finest_conf = np.argmax(confident, axis=1)
            best_peak = np.argmax(np.where(level_usable, level_peak, -np.inf), axis=1)
            sel = np.where(confident.any(axis=1), finest_conf, best_peak)
            target2d = np.take_along_axis(level_t2d, sel[:, None, None], axis=1)[:, 0]
            target3d = np.take_along_axis(level_t3d, sel[:, None, None], axis=1)[:, 0]
            peak = np.where(usable, np.max(np.where(level_usable, level_peak, -np.inf), axis=1), 0.0)

            active = inside & usable
            if k != state.query_frame:
                d2d[k] = np.where(active[:, None], target2d - uv, 0.0)
                d3d[k] = np.where(active[:, None], target3d - state.tracks3d[k], 0.0)

            vis_step = np.clip(
                self.vis_gain * (peak - self.vis_floor),
                -self.max_logit_step,
                self.max_logit_step,
            )
            dl_vis[k] = np.where(inside & usable, vis_step, -self.oob_vis_penalty)

            residual = np.linalg.norm(state.tracks3d[k] - anchors[k], axis=1)
            dyn_step = np.clip(
                self.dyn_gain * (residual / rho - 1.0),
                -self.max_logit_step,
                self.max_logit_step,
            )
            dl_dyn[k] = np.where(inside, dyn_step, 0.0)

        return UpdaterDeltas(tracks2d=d2d, tracks3d=d3d, logit_dyn=dl_dyn, logit_vis=dl_vis)


# ---------------------------------------------------------------------------
# One loop step.


@dataclass(frozen=True)
class StepRecord:
    """Run-log entry for one loop iteration."""

    iteration: int
    reprojection_rmse: float
    ba_report: BAReport | None
    procrustes_frozen: tuple[int, ...]
    ba_frozen_reason: str | None
    low_confidence: bool
    num_static: int


def _in_image(tracks2d: np.ndarray) -> np.ndarray:
    return np.all((tracks2d >= 0.0) & (tracks2d <= 1.0), axis=-1)


def state_rmse(state: TrackState) -> float:
    """Reprojection RMSE of the fused world points against tracks2d.

    Observations are weighted by (1 - p_dyn) * p_vis and gated to
    in-image track positions, so the value reflects the static,
    visible evidence the loop is actually consistent with.
    """
    t, n = state.num_frames, state.num_points
    frames = np.repeat(np.arange(t), n)
    points = np.tile(np.arange(n), t)
    weights = ((1.0 - state.p_dyn) * state.p_vis * _in_image(state.tracks2d)).ravel()
    obs = Observations(
        frame=frames, point=points, uv=state.tracks2d.reshape(-1, 2), weight=weights
    )
    return reprojection_rmse(list(state.poses), state.world_points, obs)


def joint_motion_step(
    state: TrackState,
    updater: TrackUpdater,
    features: FrameFeatures,
    config: LoopConfig | None = None,
) -> tuple[TrackState, StepRecord]:
    """Advance the loop by one iteration.

    Order: updater deltas, per-frame Procrustes re-registration (adopted
    as the new poses), world-point fusion with dynamic filtering, BA on
    the static subset, anchor-dependent quantities left to the next
    step (anchors are derived from the poses stored in the returned
    state). Procrustes degeneracy freezes that frame's pose; BA failure
    freezes all poses at their Procrustes values; both are recorded.
    """
    config = config or LoopConfig()
    k1 = state.iteration + 1

    anchors = anchor_points(
        state.queries, list(features.depths), list(state.poses), state.query_frame
    )
    deltas = updater.update(state, features, anchors)

    s = config.updater_step_scale
    tracks2d = state.tracks2d + s * deltas.tracks2d
    tracks3d = state.tracks3d + s * deltas.tracks3d
    p_dyn = logit_to_probability(probability_to_logit(state.p_dyn) + deltas.logit_dyn)
    p_vis = logit_to_probability(probability_to_logit(state.p_vis) + deltas.logit_vis)

    poses = list(state.poses)
    procrustes_frozen: list[int] = []
    if k1 % config.procrustes_every == 0:
        if config.dynamic_filtering:
            reg_w = (1.0 - p_dyn) * p_vis
        else:
            reg_w = p_vis.copy()
        for k in range(state.num_frames):
            try:
                tr = weighted_procrustes(tracks3d[k], state.world_points, reg_w[k])
            except DegenerateInput:
                procrustes_frozen.append(k)
                continue
            old = poses[k]
            poses[k] = CameraPose(
                rotation=tr.quaternion(),
                translation=tr.translation,
                focal=old.focal,
                principal_point=old.principal_point,
            )

    world_tracks = camera_tracks_to_world(tracks3d, poses)
    threshold = config.dyn_threshold if config.dynamic_filtering else 2.0
    fused = fuse_world_points(world_tracks, p_dyn, p_vis, threshold)

    ba_report = None
    ba_frozen_reason = None
    if k1 % config.ba_every == 0:
        static_idx = np.flatnonzero(fused.static_mask)
        if static_idx.size == 0:
            ba_frozen_reason = "no static points to adjust against"
        else:
            t = state.num_frames
            frames = np.repeat(np.arange(t), static_idx.size)
            points = np.tile(static_idx, t)
            uv = tracks2d[:, static_idx].reshape(-1, 2)
            weights = (p_vis[:, static_idx] * _in_image(tracks2d[:, static_idx])).ravel()
            try:
                poses, ba_report = solve_ba(
                    BAProblem(
                        world_points=fused.points,
                        observations=Observations(frame=frames, point=points, uv=uv, weight=weights),
                        poses=tuple(poses),
                    ),
                    BAOptions(),
                )
                poses = list(poses)
            except (InsufficientObservations, NumericalFailure) as exc:
                ba_frozen_reason = str(exc)

    new_state = TrackState(
        tracks2d=tracks2d,
        tracks3d=tracks3d,
        p_dyn=p_dyn,
        p_vis=p_vis,
        poses=tuple(poses),
        iteration=k1,
        queries=state.queries,
        query_frame=state.query_frame,
        world_points=fused.points,
        static_mask=fused.static_mask,
    )
    record = StepRecord(
        iteration=k1,
        reprojection_rmse=state_rmse(new_state),
        ba_report=ba_report,
        procrustes_frozen=tuple(procrustes_frozen),
        ba_frozen_reason=ba_frozen_reason,
        low_confidence=fused.low_confidence,
        num_static=int(fused.static_mask.sum()),
    )
    if procrustes_frozen:
        logger.debug("iteration %d froze Procrustes for frames %s", k1, procrustes_frozen)
    if ba_frozen_reason:
        logger.debug("iteration %d froze BA: %s", k1, ba_frozen_reason)
    return new_state, record


# ---------------------------------------------------------------------------
# Full pipeline.


@dataclass(frozen=True)
class PipelineResult:
    """Best state encountered, the run log, and derived world tracks.

    ``rmse_curve`` starts at the initialization (index 0) followed by one
    value per iteration; ``state`` is the lowest-RMSE state seen, which
    is not necessarily the last one.
    """

    state: TrackState
    records: tuple[StepRecord, ...]
    world_tracks: np.ndarray  # (T, N, 3)
    rmse_curve: tuple[float, ...]
    best_iteration: int


def run_pipeline(
    queries: np.ndarray,
    depths: list[DepthMap] | tuple[DepthMap, ...],
    poses: list[CameraPose] | tuple[CameraPose, ...],
    scale_shift: ScaleShift,
    config: LoopConfig | None = None,
    updater: TrackUpdater | None = None,
    images: np.ndarray | None = None,
    query_frame: int = 0,
) -> PipelineResult:
    """Initialize and iterate the joint refinement loop.

    Builds the per-frame pyramids once, runs ``config.num_iterations``
    steps, and returns the best state encountered by recorded RMSE along
    with the full run log and the tracks re-expressed in world
    coordinates under that state's poses.
    """
    config = config or LoopConfig()
    updater = updater or CorrelationMatchingUpdater()

    state = init_state(queries, depths, poses, scale_shift, query_frame)
    metric = [apply_scale_shift(d, scale_shift)[0] for d in depths]
    features = build_frame_features(metric, poses, images)

    curve = [state_rmse(state)]
    best_state = state
    best_rmse = curve[0]
    best_iteration = 0
    records: list[StepRecord] = []
    logger.info("initial reprojection rmse %.3e", curve[0])

    for _ in range(config.num_iterations):
        state, record = joint_motion_step(state, updater, features, config)
        records.append(record)
        curve.append(record.reprojection_rmse)
        logger.info("iteration %d reprojection rmse %.3e", record.iteration, record.reprojection_rmse)
        if record.reprojection_rmse < best_rmse:
            best_rmse = record.reprojection_rmse
            best_state = state
            best_iteration = record.iteration

    world_tracks = camera_tracks_to_world(best_state.tracks3d, list(best_state.poses))
    return PipelineResult(
        state=best_state,
        records=tuple(records),
        world_tracks=world_tracks,
        rmse_curve=tuple(curve),
        best_iteration=best_iteration,
    )
