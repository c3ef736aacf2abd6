"""Multi-scale correlation features over images and point maps.

Feature pyramids use average pooling at integer scales 1..L (level s has
resolution ceil(base/s) per axis). Image levels carry local
intensity-plus-gradient patch descriptors, L2-normalized; point-map
levels carry the pooled camera-frame 3D points themselves, since the 3D
correlation encodes relative translations between sampled points and the
query.

Level-grid coordinates: level pixel p covers base pixels [p*s, (p+1)*s),
so its nominal center sits at normalized (p + 0.5) * s / base. Sampling
is bilinear with border clamping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, ImageTooSmall, InvalidQuery, QueryOutsideImage, ShapeMismatch
from .geometry import BEHIND_CAMERA_EPS, CameraPose, DepthMap, PointMap, quat_to_matrix

MIN_BASE_SIZE = 16
DEFAULT_NUM_LEVELS = 4
DEFAULT_DELTA = 3
DEFAULT_NUM_FREQS = 4

_DESCRIPTOR_EPS = 1e-12


# ---------------------------------------------------------------------------
# Pyramid construction.


@dataclass(frozen=True)
class PyramidLevel:
    scale: int
    data: np.ndarray  # (h, w, C)
    valid: np.ndarray | None  # (h, w) or None for image levels

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 3:
            raise ShapeMismatch(f"level data must be (h, w, C), got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        if self.valid is not None:
            m = np.array(self.valid, dtype=bool)
            if m.shape != d.shape[:2]:
                raise ShapeMismatch("level valid mask does not match data")
            m.setflags(write=False)
            object.__setattr__(self, "valid", m)


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-frame feature stack: `kind` is "image" or "points"."""

    kind: str
    base_width: int
    base_height: int
    levels: tuple[PyramidLevel, ...]

    def __post_init__(self):
        if self.kind not in ("image", "points"):
            raise ValueError(f"unknown pyramid kind {self.kind!r}")
        object.__setattr__(self, "levels", tuple(self.levels))


def _pool_sum(arr: np.ndarray, s: int, axis: int) -> np.ndarray:
    edges = np.arange(0, arr.shape[axis], s)
    return np.add.reduceat(arr, edges, axis=axis)


def average_pool(arr: np.ndarray, s: int, mask: np.ndarray | None = None):
    """s x s block average with partial edge blocks.

    Without a mask, plain means. With a mask, means over valid entries
    only; blocks with no valid entry produce zeros and a False mask.
    Returns (pooled, pooled_mask_or_None).
    """
    if s == 1:
        return arr.astype(float), (None if mask is None else mask.copy())
    a = arr.astype(float)
    if mask is None:
        h, w = a.shape[:2]
        sums = _pool_sum(_pool_sum(a, s, 0), s, 1)
        bh = np.minimum(np.arange(0, h, s) + s, h) - np.arange(0, h, s)
        bw = np.minimum(np.arange(0, w, s) + s, w) - np.arange(0, w, s)
        counts = np.outer(bh, bw).astype(float)
        if a.ndim == 3:
            counts = counts[:, :, None]
        return sums / counts, None
    m = mask.astype(float)
    weighted = a * (m[:, :, None] if a.ndim == 3 else m)
    sums = _pool_sum(_pool_sum(weighted, s, 0), s, 1)
    counts = _pool_sum(_pool_sum(m, s, 0), s, 1)
    ok = counts > 0
    safe = np.where(ok, counts, 1.0)
    pooled = sums / (safe[:, :, None] if a.ndim == 3 else safe)
    pooled = np.where((ok[:, :, None] if a.ndim == 3 else ok), pooled, 0.0)
    return pooled, ok


def image_descriptors(intensity: np.ndarray) -> np.ndarray:
    """Local intensity+gradient patch descriptors, one per pixel.

    Stacks (intensity, grad_x, grad_y) over the 3x3 neighborhood (edge
    padded), giving 27 channels. The mean intensity of the patch is
    subtracted from the nine intensity channels so that descriptors
    respond to local structure rather than absolute brightness, then each
    pixel's vector is L2-normalized. A constant image yields identical
    (zero) descriptors everywhere.
    """
    intensity = np.asarray(intensity, dtype=float)
    gy, gx = np.gradient(intensity)
    feats = np.stack([intensity, gx, gy], axis=-1)  # (h, w, 3)
    padded = np.pad(feats, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = intensity.shape
    patches = [
        padded[dy : dy + h, dx : dx + w, :] for dy in range(3) for dx in range(3)
    ]
    desc = np.concatenate(patches, axis=-1).copy()  # (h, w, 27)
    intensity_idx = np.arange(0, 27, 3)
    desc[..., intensity_idx] -= desc[..., intensity_idx].mean(axis=-1, keepdims=True)
    norms = np.linalg.norm(desc, axis=-1, keepdims=True)
    return desc / np.maximum(norms, _DESCRIPTOR_EPS)


def build_pyramid(source, num_levels: int = DEFAULT_NUM_LEVELS) -> FeaturePyramid:
    """Build a feature pyramid from a grayscale image or a PointMap.

    Image input: (H, W) float array; each level pools the intensity then
    computes patch descriptors at that level. PointMap input: each level
    pools the camera-frame points over valid pixels. The base must be at
    least 16x16.
    """
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    if isinstance(source, PointMap):
        h, w = source.height, source.width
        if h < MIN_BASE_SIZE or w < MIN_BASE_SIZE:
            raise ImageTooSmall(f"point map {w}x{h} below {MIN_BASE_SIZE}x{MIN_BASE_SIZE}")
        levels = []
        for s in range(1, num_levels + 1):
            pooled, ok = average_pool(source.points, s, source.valid)
            if ok is None:
                ok = np.ones(pooled.shape[:2], dtype=bool)
            levels.append(PyramidLevel(s, pooled, ok))
        return FeaturePyramid("points", w, h, tuple(levels))

    img = np.asarray(source, dtype=float)
    if img.ndim != 2:
        raise ShapeMismatch(f"image must be 2D grayscale, got shape {img.shape}")
    h, w = img.shape
    if h < MIN_BASE_SIZE or w < MIN_BASE_SIZE:
        raise ImageTooSmall(f"image {w}x{h} below {MIN_BASE_SIZE}x{MIN_BASE_SIZE}")
    levels = []
    for s in range(1, num_levels + 1):
        pooled, _ = average_pool(img, s)
        levels.append(PyramidLevel(s, image_descriptors(pooled), None))
    return FeaturePyramid("image", w, h, tuple(levels))


# ---------------------------------------------------------------------------
# Sampling.


def level_grid_coords(uv: np.ndarray, scale: int, base_width: int, base_height: int) -> np.ndarray:
    """Normalized uv (..., 2) to fractional (col, row) in a level grid."""
    uv = np.asarray(uv, dtype=float)
    col = uv[..., 0] * base_width / scale - 0.5
    row = uv[..., 1] * base_height / scale - 0.5
    return np.stack([col, row], axis=-1)


def level_grid_uv(colrow: np.ndarray, scale: int, base_width: int, base_height: int) -> np.ndarray:
    """Fractional level-grid (col, row) back to normalized uv."""
    colrow = np.asarray(colrow, dtype=float)
    u = (colrow[..., 0] + 0.5) * scale / base_width
    v = (colrow[..., 1] + 0.5) * scale / base_height
    return np.stack([u, v], axis=-1)


def bilinear_sample(data: np.ndarray, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Bilinear sampling of (h, w, C) at fractional positions, border clamped."""
    h, w = data.shape[:2]
    c = np.clip(cols, 0.0, w - 1.0)
    r = np.clip(rows, 0.0, h - 1.0)
    c0 = np.floor(c).astype(int)
    r0 = np.floor(r).astype(int)
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fc = (c - c0)[..., None]
    fr = (r - r0)[..., None]
    top = data[r0, c0] * (1 - fc) + data[r0, c1] * fc
    bot = data[r1, c0] * (1 - fc) + data[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def _window_offsets(delta: int) -> np.ndarray:
    """(K^2, 2) integer (dcol, drow) offsets, row-major over drow then dcol."""
    r = np.arange(-delta, delta + 1)
    dc, dr = np.meshgrid(r, r)
    return np.stack([dc.ravel(), dr.ravel()], axis=1)


def window_samples(pyramid: FeaturePyramid, uv: np.ndarray, delta: int = DEFAULT_DELTA):
    """Sample every level of a pyramid on the offset window around uv.

    uv is (N, 2) normalized coordinates. Returns (samples, positions,
    valids): samples is a list over levels of (N, K^2, C) arrays,
    positions the matching (N, K^2, 2) normalized coordinates of each
    sample site, and valids the (N, K^2) bilinear validity fraction
    (all ones for levels without a mask), where K = 2*delta + 1.
    Sampling clamps to the image border.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    offsets = _window_offsets(delta)  # (K2, 2)
    samples = []
    positions = []
    valids = []
    for level in pyramid.levels:
        cr = level_grid_coords(uv, level.scale, pyramid.base_width, pyramid.base_height)
        cols = cr[:, None, 0] + offsets[None, :, 0]
        rows = cr[:, None, 1] + offsets[None, :, 1]
        h, w = level.data.shape[:2]
        cols_c = np.clip(cols, 0.0, w - 1.0)
        rows_c = np.clip(rows, 0.0, h - 1.0)
        samples.append(bilinear_sample(level.data, cols_c, rows_c))
        pos = level_grid_uv(
            np.stack([cols_c, rows_c], axis=-1), level.scale, pyramid.base_width, pyramid.base_height
        )
        positions.append(pos)
        if level.valid is None:
            valids.append(np.ones(cols_c.shape))
        else:
            vs = bilinear_sample(level.valid.astype(float)[:, :, None], cols_c, rows_c)
            valids.append(vs[..., 0])
    return samples, positions, valids


# ---------------------------------------------------------------------------
# Harmonic encodings.


def harmonic_encode(v: np.ndarray, num_freqs: int = DEFAULT_NUM_FREQS) -> np.ndarray:
    """Sin/cos encoding at octave frequencies.

    For each coordinate j and each k in 0..num_freqs-1 emits
    (sin(2^k pi v_j), cos(2^k pi v_j)); coordinates are outer, frequencies
    inner, so a length-D input yields 2 * num_freqs * D values.
    """
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi  # (F,)
    angles = v[..., None] * freqs  # (..., D, F)
    enc = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., D, F, 2)
    out = enc.reshape(v.shape[:-1] + (-1,)) if not scalar else enc.reshape(-1)
    return out


def time_embedding(t: int, num_frames: int, num_freqs: int = DEFAULT_NUM_FREQS) -> np.ndarray:
    """Harmonic encoding of the normalized frame index t / num_frames."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    return harmonic_encode(np.array([t / num_frames]), num_freqs)


def global_position_embedding(
    current: np.ndarray, anchor: np.ndarray, num_freqs: int = DEFAULT_NUM_FREQS
) -> np.ndarray:
    """Harmonic encoding of the offset between a track point and its anchor."""
    current = np.asarray(current, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    if current.shape != anchor.shape:
        raise ShapeMismatch(f"current {current.shape} vs anchor {anchor.shape}")
    return harmonic_encode(current - anchor, num_freqs)


# ---------------------------------------------------------------------------
# 3D correlation.


def _project_query(query_point: np.ndarray, focal: float, principal_point) -> np.ndarray:
    q = np.asarray(query_point, dtype=float)
    z = q[2]
    if z <= BEHIND_CAMERA_EPS:
        raise QueryOutsideImage(f"query point is behind the camera (z = {z})")
    uv = focal * q[:2] / z + np.asarray(principal_point, dtype=float)
    if not (0.0 <= uv[0] <= 1.0 and 0.0 <= uv[1] <= 1.0):
        raise QueryOutsideImage(f"query projects to {uv}, outside [0, 1]^2")
    return uv


def corr3d(
    query_point: np.ndarray,
    pyramid: FeaturePyramid,
    focal: float,
    principal_point=(0.5, 0.5),
    delta: int = DEFAULT_DELTA,
    num_freqs: int = DEFAULT_NUM_FREQS,
) -> np.ndarray:
    """3D correlation feature of a camera-frame query against a point map.

    Projects the query, samples the point-map pyramid at every offset
    ||d||_inf <= delta around the projection at every level, and encodes
    each relative translation (sample - query) harmonically. Levels are
    concatenated in scale order, offsets row-major, giving
    (2*delta+1)^2 * L * 6 * num_freqs values.

    Raises QueryOutsideImage when the query does not project inside the
    image (behind-camera included); callers clamp and flag instead.
    """
    if pyramid.kind != "points":
        raise ValueError("corr3d needs a point-map pyramid")
    uv = _project_query(query_point, focal, principal_point)
    samples, _, _ = window_samples(pyramid, uv[None, :], delta)
    query = np.asarray(query_point, dtype=float)
    chunks = [harmonic_encode(level_samples[0] - query, num_freqs).ravel() for level_samples in samples]
    return np.concatenate(chunks)


def corr2d(
    query_descriptor: list[np.ndarray],
    pyramid: FeaturePyramid,
    uv: np.ndarray,
    delta: int = DEFAULT_DELTA,
) -> np.ndarray:
    """Descriptor correlation over the same offset window, one dot per site.

    ``query_descriptor`` holds one descriptor per level (as sampled from
    the query frame's pyramid). Returns (2*delta+1)^2 * L similarity
    values in the same ordering as corr3d.
    """
    if pyramid.kind != "image":
        raise ValueError("corr2d needs an image pyramid")
    if len(query_descriptor) != len(pyramid.levels):
        raise ShapeMismatch("one query descriptor per level required")
    samples, _, _ = window_samples(pyramid, np.asarray(uv, dtype=float)[None, :], delta)
    sims = [s[0] @ np.asarray(qd, dtype=float) for s, qd in zip(samples, query_descriptor)]
    return np.concatenate(sims)


def sample_descriptors(pyramid: FeaturePyramid, uv: np.ndarray) -> list[np.ndarray]:
    """Bilinear descriptor at uv (N, 2) from every level: list of (N, C)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    out = []
    for level in pyramid.levels:
        cr = level_grid_coords(uv, level.scale, pyramid.base_width, pyramid.base_height)
        out.append(bilinear_sample(level.data, cr[:, 0], cr[:, 1]))
    return out


def normalize_pointmap(pm: PointMap) -> tuple[PointMap, float]:
    """Divide a point map by its mean valid depth; returns (map, mean depth)."""
    if not np.any(pm.valid):
        raise EmptyInput("point map has no valid pixels")
    mean_depth = float(pm.points[pm.valid][:, 2].mean())
    if mean_depth <= 0:
        raise ValueError(f"mean valid depth must be positive, got {mean_depth}")
    return PointMap(pm.width, pm.height, pm.points / mean_depth, pm.valid), mean_depth


# ---------------------------------------------------------------------------
# Anchors and assembled features.


def anchor_points(
    queries: np.ndarray,
    depths: list[DepthMap],
    poses: list[CameraPose],
    query_frame: int = 0,
) -> np.ndarray:
    """Per-frame camera motion anchors for the query points, (T, N, 3).

    Same definition as ego_motion_tracks (unproject at the query frame,
    re-express everywhere) but computed through explicit homogeneous
    matrices so the two implementations check each other.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    dmap = depths[query_frame]
    cols = np.clip(np.floor(queries[:, 0] * dmap.width).astype(int), 0, dmap.width - 1)
    rows = np.clip(np.floor(queries[:, 1] * dmap.height).astype(int), 0, dmap.height - 1)
    d = dmap.values[rows, cols]
    if np.any(d <= 0):
        raise InvalidQuery("anchor query falls on invalid depth")

    pose0 = poses[query_frame]
    K = np.array(
        [
            [pose0.focal, 0.0, pose0.principal_point[0]],
            [0.0, pose0.focal, pose0.principal_point[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    ones = np.ones((queries.shape[0], 1))
    rays = np.linalg.solve(K, np.concatenate([queries, ones], axis=1).T).T
    p_cam0 = rays * d[:, None]

    def c2w(pose: CameraPose) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(pose.rotation)
        M[:3, 3] = pose.translation
        return M

    hom = np.concatenate([p_cam0, ones], axis=1)  # (N, 4)
    world = (c2w(pose0) @ hom.T).T
    anchors = []
    for pose in poses:
        cam = (np.linalg.inv(c2w(pose)) @ world.T).T
        anchors.append(cam[:, :3])
    return np.stack(anchors)


@dataclass(frozen=True)
class CorrelationFeature:
    """Assembled per-(query, frame) feature for a track updater."""

    corr3d: np.ndarray
    e_time: np.ndarray
    e_gpos: np.ndarray
    p_dyn: float
    p_vis: float
    clamped: bool  # True when the query projected outside and was clamped


def build_correlation_feature(
    current3d: np.ndarray,
    anchor3d: np.ndarray,
    frame: int,
    num_frames: int,
    pyramid: FeaturePyramid,
    focal: float,
    principal_point=(0.5, 0.5),
    p_dyn: float = 0.5,
    p_vis: float = 1.0,
    delta: int = DEFAULT_DELTA,
    num_freqs: int = DEFAULT_NUM_FREQS,
) -> CorrelationFeature:
    """Assemble the full correlation feature for one query in one frame.

    Out-of-image queries are clamped to the border for sampling and
    flagged rather than raised, matching what the iterative loop needs.
    """
    current3d = np.asarray(current3d, dtype=float)
    clamped = False
    try:
        uv = _project_query(current3d, focal, principal_point)
    except QueryOutsideImage:
        clamped = True
        z = max(current3d[2], BEHIND_CAMERA_EPS * 2)
        raw = focal * current3d[:2] / z + np.asarray(principal_point, dtype=float)
        uv = np.clip(raw, 0.0, 1.0)
    samples, _, _ = window_samples(pyramid, uv[None, :], delta)
    chunks = [harmonic_encode(s[0] - current3d, num_freqs).ravel() for s in samples]
    return CorrelationFeature(
        corr3d=np.concatenate(chunks),
        e_time=time_embedding(frame, num_frames, num_freqs),
        e_gpos=global_position_embedding(current3d, anchor3d, num_freqs),
        p_dyn=float(p_dyn),
        p_vis=float(p_vis),
        clamped=clamped,
    )
