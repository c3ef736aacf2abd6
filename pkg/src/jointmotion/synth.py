"""Synthetic scenes with exact ground truth.

The world is a set of textured planar quads: large static background
planes plus small rigid quads that move along smooth pose splines. Depth
maps, images, tracks, and occlusion labels all come from exact ray-quad
intersection, so every geometric relation the rest of the package
promises can be checked against these scenes at solver tolerances.

Values that end up in float32 containers on disk (normalized depths,
images) are quantized to float32 precision at generation time, so a
save/load round trip reproduces the ground truth exactly. Metric depth
is defined as a_true * normalized + b_true on top of the quantized
normalized maps, which keeps that relation exact in float64 too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleSpec, ShapeMismatch
from .geometry import (
    BEHIND_CAMERA_EPS,
    CameraPose,
    DepthMap,
    ScaleShift,
    matrix_to_quat,
    pixel_centers,
    quat_from_rotvec,
    quat_multiply,
    quat_slerp,
    quat_to_matrix,
)

_WORLD_UP = np.array([0.0, 1.0, 0.0])

CAMERA_KINDS = ("orbit", "forward", "random_smooth")


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene; fully determined by `seed`."""

    seed: int = 0
    num_frames: int = 12
    width: int = 64
    height: int = 48
    num_static_points: int = 40
    num_objects: int = 1
    points_per_object: int = 8
    camera: str = "orbit"
    focal: float = 1.0
    object_motion: float = 0.4
    object_rotation_deg: float = 20.0
    texture_frequency: float = 6.0
    texture_components: int = 8
    supersample: int = 3
    query_frame: int = 0
    # Default degradation magnitudes, consumed by perturb() and the CLI.
    pose_rot_deg: float = 0.0
    pose_trans_frac: float = 0.0
    depth_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.num_frames < 2:
            raise InfeasibleSpec("need at least 2 frames")
        if self.width < 16 or self.height < 16:
            raise InfeasibleSpec("image must be at least 16x16")
        if self.num_static_points < 0 or self.num_objects < 0 or self.points_per_object < 0:
            raise InfeasibleSpec("point counts must be non-negative")
        if self.num_static_points + self.num_objects * self.points_per_object < 1:
            raise InfeasibleSpec("scene must contain at least one query point")
        if self.camera not in CAMERA_KINDS:
            raise InfeasibleSpec(f"camera must be one of {CAMERA_KINDS}, got {self.camera!r}")
        if not 0 <= self.query_frame < self.num_frames:
            raise InfeasibleSpec(f"query_frame {self.query_frame} out of range")
        if self.focal <= 0:
            raise InfeasibleSpec("focal must be positive")
        if self.supersample < 1:
            raise InfeasibleSpec("supersample must be >= 1")


@dataclass(frozen=True)
class Surface:
    """Planar textured quad; per-frame frame vectors allow rigid motion."""

    centers: np.ndarray  # (T, 3)
    e1: np.ndarray  # (T, 3) unit, orthogonal to e2
    e2: np.ndarray  # (T, 3)
    half_a: float
    half_b: float
    tex_amp: np.ndarray  # (K,)
    tex_freq: np.ndarray  # (K, 2)
    tex_phase: np.ndarray  # (K,)
    albedo: float
    dynamic: bool

    def texture(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Intensity at surface-local coordinates; moves with the quad.

        Frequencies are cycles per world unit of the local coordinates,
        so the pattern scale is independent of the quad extents.
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        phase = 2.0 * np.pi * (
            a[..., None] * self.tex_freq[:, 0] + b[..., None] * self.tex_freq[:, 1]
        ) + self.tex_phase
        raw = (self.tex_amp * np.sin(phase)).sum(axis=-1)
        return self.albedo + 0.45 * raw / self.tex_amp.sum()


@dataclass(frozen=True)
class SceneGroundTruth:
    """Everything the rest of the package can be checked against.

    Point ordering: static queries first, then object queries grouped by
    object. ``tracks2d`` holds NaN where the projection is undefined
    (behind the camera); ``visibility`` is False there.
    """

    spec: SceneSpec
    poses: tuple[CameraPose, ...]
    depths: tuple[DepthMap, ...]  # metric, a_true * normalized + b_true
    depths_normalized: tuple[DepthMap, ...]
    scale_shift: ScaleShift
    images: np.ndarray  # (T, H, W)
    queries: np.ndarray  # (N, 2)
    query_frame: int
    tracks2d: np.ndarray  # (T, N, 2)
    tracks3d_cam: np.ndarray  # (T, N, 3)
    tracks3d_world: np.ndarray  # (T, N, 3)
    visibility: np.ndarray  # (T, N) bool
    dynamic: np.ndarray  # (N,) bool
    surfaces: tuple[Surface, ...] = field(repr=False, compare=False, default=())

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def num_points(self) -> int:
        return self.queries.shape[0]

    def scene_scale(self) -> float:
        """RMS spread of static world points (camera spread as fallback)."""
        static = self.tracks3d_world[0][~self.dynamic]
        if static.shape[0] >= 2:
            return float(np.sqrt(((static - static.mean(axis=0)) ** 2).sum(axis=1).mean()))
        centers = np.stack([p.translation for p in self.poses])
        return float(np.sqrt(((centers - centers.mean(axis=0)) ** 2).sum(axis=1).mean()))


@dataclass(frozen=True)
class PerturbedInputs:
    """Degraded pipeline inputs paired with untouched ground truth."""

    poses: tuple[CameraPose, ...]
    depths_normalized: tuple[DepthMap, ...]
    tracks2d: np.ndarray
    tracks3d_cam: np.ndarray


def _look_at(position: np.ndarray, target: np.ndarray, focal: float) -> CameraPose:
    z = target - position
    nz = np.linalg.norm(z)
    if nz < 1e-9:
        raise InfeasibleSpec("camera position coincides with its target")
    z = z / nz
    if abs(float(z @ _WORLD_UP)) > 0.99:
        raise InfeasibleSpec("camera looks straight along the up axis")
    x = np.cross(_WORLD_UP, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return CameraPose(matrix_to_quat(R), position, focal)


def _camera_trajectory(spec: SceneSpec, rng: np.random.Generator) -> list[CameraPose]:
    T = spec.num_frames
    target = np.array([0.0, 0.0, 2.5])
    radius = 3.5
    if spec.camera == "orbit":
        # Arc kept moderate: enough parallax to condition pose recovery,
        # small enough per-frame viewpoint change that fixed-grid patch
        # appearance stays comparable across the whole sweep.
        angles = np.linspace(-0.3, 0.3, T)
        bob = 0.18 * np.sin(np.linspace(0.0, 2.2, T) + rng.uniform(0, 2 * np.pi))
        positions = np.stack(
            [radius * np.sin(angles), 0.4 + bob, 2.5 - radius * np.cos(angles)], axis=1
        )
    elif spec.camera == "forward":
        sway = 0.35 * np.sin(np.linspace(0.0, 2.5, T) + rng.uniform(0, 2 * np.pi))
        zs = np.linspace(-1.2, 0.6, T)
        positions = np.stack([sway, 0.3 + 0.1 * np.sin(np.linspace(0, 3, T)), zs], axis=1)
    else:  # random_smooth: sum of low-frequency sinusoids, seeded
        t = np.linspace(0.0, 1.0, T)
        positions = np.empty((T, 3))
        base = np.array([0.0, 0.35, -1.0])
        amp = np.array([0.9, 0.25, 0.7])
        for k in range(3):
            a = rng.uniform(0.4, 1.0, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            positions[:, k] = base[k] + amp[k] * (
                0.7 * a[0] * np.sin(2 * np.pi * 0.5 * t + ph[0])
                + 0.3 * a[1] * np.sin(2 * np.pi * 1.0 * t + ph[1])
            )
    return [_look_at(p, target, spec.focal) for p in positions]


def _texture_params(
    rng: np.random.Generator, count: int, freq_lo: float, freq_hi: float, freq_scale: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sinusoid amplitudes, 2D frequency vectors, and phases.

    Frequency magnitudes (cycles per world unit) are drawn from
    [freq_lo, freq_hi] * freq_scale with isotropic random directions, so
    every surface carries structure in multiple orientations and local
    matching has no aperture ambiguity.
    """
    amp = rng.uniform(0.5, 1.0, size=count)
    mag = rng.uniform(freq_lo, freq_hi, size=count) * freq_scale
    ang = rng.uniform(0.0, 2.0 * np.pi, size=count)
    freq = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return amp, freq, phase


def _static_surface(
    rng: np.random.Generator,
    T: int,
    center: np.ndarray,
    e1: np.ndarray,
    e2: np.ndarray,
    half_a: float,
    half_b: float,
    spec: SceneSpec,
) -> Surface:
    # Wavelengths of roughly 0.35..0.8 world units at the default
    # texture_frequency: 5..12 pixels when projected from scene depths.
    # Long enough that a half-pixel sampling misalignment barely moves
    # the local patch appearance, short enough to localize matches.
    amp, freq, phase = _texture_params(
        rng, spec.texture_components, 1.25, 2.85, spec.texture_frequency / 6.0
    )
    return Surface(
        centers=np.tile(center, (T, 1)),
        e1=np.tile(e1, (T, 1)),
        e2=np.tile(e2, (T, 1)),
        half_a=half_a,
        half_b=half_b,
        tex_amp=amp,
        tex_freq=freq,
        tex_phase=phase,
        albedo=float(rng.uniform(0.35, 0.65)),
        dynamic=False,
    )


def _orthonormal_pair(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    e1 = rng.normal(size=3)
    e1 /= np.linalg.norm(e1)
    helper = rng.normal(size=3)
    e2 = helper - (helper @ e1) * e1
    e2 /= np.linalg.norm(e2)
    return e1, e2


def _object_surface(rng: np.random.Generator, spec: SceneSpec) -> Surface:
    """Small rigid quad on a <=3-control-pose spline (slerp + Bezier)."""
    T = spec.num_frames
    s = np.linspace(0.0, 1.0, T)

    # Keep moving objects in front of the mid/background planes.
    start = np.array(
        [rng.uniform(-0.9, 0.9), rng.uniform(-0.5, 0.7), rng.uniform(1.6, 2.1)]
    )
    sweep = rng.normal(size=3)
    sweep[2] *= 0.3  # mostly lateral motion keeps the object visible
    sweep = sweep / np.linalg.norm(sweep) * spec.object_motion
    mid = start + 0.5 * sweep + 0.25 * spec.object_motion * rng.normal(size=3) * [1, 1, 0.3]
    end = start + sweep
    ctrl = np.stack([start, mid, end])
    centers = (
        (1 - s)[:, None] ** 2 * ctrl[0]
        + 2 * (s * (1 - s))[:, None] * ctrl[1]
        + (s**2)[:, None] * ctrl[2]
    )

    angle = np.deg2rad(spec.object_rotation_deg)
    axis0 = rng.normal(size=3)
    axis0 /= np.linalg.norm(axis0)
    axis1 = rng.normal(size=3)
    axis1 /= np.linalg.norm(axis1)
    q0 = np.array([1.0, 0.0, 0.0, 0.0])
    q1 = quat_from_rotvec(axis0 * 0.5 * angle)
    q2 = quat_from_rotvec(axis0 * 0.5 * angle + axis1 * 0.5 * angle)
    e1_local, e2_local = _orthonormal_pair(rng)
    e1 = np.empty((T, 3))
    e2 = np.empty((T, 3))
    for t, st in enumerate(s):
        q = quat_slerp(q0, q1, 2 * st) if st < 0.5 else quat_slerp(q1, q2, 2 * st - 1)
        R = quat_to_matrix(q)
        e1[t] = R @ e1_local
        e2[t] = R @ e2_local

    # Objects are small and near, so they get a finer wavelength band
    # than the static surfaces for the same projected detail.
    amp, freq, phase = _texture_params(
        rng, spec.texture_components, 2.5, 6.5, spec.texture_frequency / 6.0
    )
    return Surface(
        centers=centers,
        e1=e1,
        e2=e2,
        half_a=float(rng.uniform(0.25, 0.45)),
        half_b=float(rng.uniform(0.25, 0.45)),
        tex_amp=amp,
        tex_freq=freq,
        tex_phase=phase,
        albedo=float(rng.uniform(0.35, 0.65)),
        dynamic=True,
    )


def _build_world(spec: SceneSpec, rng: np.random.Generator) -> list[Surface]:
    T = spec.num_frames
    surfaces = [
        # Back wall, large enough to cover the field of view from every pose.
        _static_surface(
            rng, T, np.array([0.0, 0.0, 4.2]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), 14.0, 14.0, spec
        )
    ]
    # Two tilted mid-depth planes provide parallax and static occlusion.
    for side in (-1.0, 1.0):
        e1 = np.array([np.cos(0.35 * side), 0.0, np.sin(0.35 * side)])
        e2 = np.array([0.12 * side, 1.0, 0.0])
        e2 = e2 - (e2 @ e1) * e1
        e2 /= np.linalg.norm(e2)
        center = np.array([side * rng.uniform(0.7, 1.1), rng.uniform(-0.2, 0.3), rng.uniform(2.6, 3.1)])
        surfaces.append(_static_surface(rng, T, center, e1, e2, 0.8, 0.7, spec))
    for _ in range(spec.num_objects):
        surfaces.append(_object_surface(rng, spec))
    return surfaces


def _raycast(surfaces: list[Surface], pose: CameraPose, t: int, uv: np.ndarray):
    """Exact first-hit intersection of pixel rays with all quads.

    Returns per ray: depth along the camera z axis (inf on miss), the
    winning surface index (-1 on miss), and the hit's surface-local
    coordinates.
    """
    rays_cam = np.concatenate(
        [(uv - pose.principal_point) / pose.focal, np.ones((uv.shape[0], 1))], axis=1
    )
    R = quat_to_matrix(pose.rotation)
    dirs = rays_cam @ R.T  # world directions with unit camera-frame z
    origin = pose.translation

    n_px = uv.shape[0]
    best = np.full(n_px, np.inf)
    winner = np.full(n_px, -1, dtype=int)
    local_a = np.zeros(n_px)
    local_b = np.zeros(n_px)
    for si, surf in enumerate(surfaces):
        c = surf.centers[t]
        e1 = surf.e1[t]
        e2 = surf.e2[t]
        n = np.cross(e1, e2)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((c - origin) @ n) / denom
        p = origin + lam[:, None] * dirs
        a = (p - c) @ e1
        b = (p - c) @ e2
        hit = (
            np.isfinite(lam)
            & (lam > BEHIND_CAMERA_EPS)
            & (np.abs(a) <= surf.half_a)
            & (np.abs(b) <= surf.half_b)
            & (lam < best)
        )
        best[hit] = lam[hit]
        winner[hit] = si
        local_a[hit] = a[hit]
        local_b[hit] = b[hit]
    return best, winner, local_a, local_b


def _shade(surfaces: list[Surface], winner: np.ndarray, local_a: np.ndarray, local_b: np.ndarray):
    image = np.zeros(winner.shape[0])
    for si, surf in enumerate(surfaces):
        sel = winner == si
        if np.any(sel):
            image[sel] = surf.texture(local_a[sel], local_b[sel])
    return image


def _render_frame(
    surfaces: list[Surface],
    pose: CameraPose,
    t: int,
    width: int,
    height: int,
    supersample: int = 1,
):
    """Depth, winner id, and intensity per pixel.

    Depth and winner are point samples at pixel centers so geometric
    ground truth stays exact. Intensity is box-averaged over a
    supersample x supersample grid per pixel: pixels integrate over
    their footprint, so image appearance varies smoothly under subpixel
    motion instead of carrying sampling-phase noise.
    """
    uv = pixel_centers(width, height).reshape(-1, 2)
    best, winner, local_a, local_b = _raycast(surfaces, pose, t, uv)
    depth = np.where(np.isfinite(best), best, 0.0)
    shape = (height, width)

    if supersample <= 1:
        image = _shade(surfaces, winner, local_a, local_b).reshape(shape)
    else:
        s = supersample
        uv_s = pixel_centers(width * s, height * s).reshape(-1, 2)
        _, winner_s, a_s, b_s = _raycast(surfaces, pose, t, uv_s)
        img_s = _shade(surfaces, winner_s, a_s, b_s).reshape(height, s, width, s)
        image = img_s.mean(axis=(1, 3))
    return depth.reshape(shape), winner.reshape(shape), image


def _segment_occluded(
    origin: np.ndarray, point: np.ndarray, surfaces: list[Surface], t: int, skip: int
) -> bool:
    """True when any quad other than `skip` cuts the segment origin->point."""
    d = point - origin
    for si, surf in enumerate(surfaces):
        if si == skip:
            continue
        n = np.cross(surf.e1[t], surf.e2[t])
        denom = float(d @ n)
        if abs(denom) < 1e-15:
            continue
        lam = float((surf.centers[t] - origin) @ n) / denom
        if not 1e-9 < lam < 1.0 - 1e-9:
            continue
        p = origin + lam * d
        a = float((p - surf.centers[t]) @ surf.e1[t])
        b = float((p - surf.centers[t]) @ surf.e2[t])
        if abs(a) <= surf.half_a and abs(b) <= surf.half_b:
            return True
    return False


def _quantize_f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def generate(spec: SceneSpec) -> SceneGroundTruth:
    """Build a scene with exact, self-consistent ground truth.

    Deterministic in spec.seed: regenerating yields bit-identical arrays.
    Raises InfeasibleSpec when the requested query quotas cannot be
    filled from the rendered first frame.
    """
    rng = np.random.default_rng(spec.seed)
    T, W, H = spec.num_frames, spec.width, spec.height
    poses = _camera_trajectory(spec, rng)
    surfaces = _build_world(spec, rng)

    depth_raw = np.empty((T, H, W))
    winners = np.empty((T, H, W), dtype=int)
    images = np.empty((T, H, W))
    for t in range(T):
        depth_raw[t], winners[t], images[t] = _render_frame(
            surfaces, poses[t], t, W, H, spec.supersample
        )
    images = _quantize_f32(images)

    valid = depth_raw > 0
    if not np.all(valid.reshape(T, -1).any(axis=1)):
        raise InfeasibleSpec("a frame rendered with no valid depth at all")

    # True affine depth encoding; normalized maps are the on-disk payload.
    min_depth = depth_raw[valid].min()
    a_true = float(rng.uniform(0.6, 1.8))
    b_true = float(0.3 * min_depth)
    scale_shift = ScaleShift(a_true, b_true)
    norm = np.where(valid, (depth_raw - b_true) / a_true, 0.0)
    norm = _quantize_f32(norm)
    metric = np.where(norm > 0, a_true * norm + b_true, 0.0)

    # Query selection on the query frame: pixel centers, grouped by surface class.
    t0 = spec.query_frame
    win0 = winners[t0]
    dyn_ids = [si for si, s in enumerate(surfaces) if s.dynamic]
    static_pool = np.nonzero((win0 >= 0) & ~np.isin(win0, dyn_ids))
    static_pool = np.stack(static_pool, axis=1)  # (n, 2) row, col
    if static_pool.shape[0] < spec.num_static_points:
        raise InfeasibleSpec(
            f"only {static_pool.shape[0]} static pixels available for {spec.num_static_points} queries"
        )
    picks = [static_pool[rng.choice(static_pool.shape[0], spec.num_static_points, replace=False)]]
    parents = [win0[picks[0][:, 0], picks[0][:, 1]]]
    for si in dyn_ids:
        pool = np.stack(np.nonzero(win0 == si), axis=1)
        if pool.shape[0] < spec.points_per_object:
            raise InfeasibleSpec(
                f"object {si} covers {pool.shape[0]} pixels, need {spec.points_per_object}"
            )
        sel = pool[rng.choice(pool.shape[0], spec.points_per_object, replace=False)]
        picks.append(sel)
        parents.append(np.full(sel.shape[0], si))
    pix = np.concatenate(picks)  # (N, 2) row, col
    parent = np.concatenate(parents)
    N = pix.shape[0]
    queries = np.stack([(pix[:, 1] + 0.5) / W, (pix[:, 0] + 0.5) / H], axis=1)
    dynamic = np.isin(parent, dyn_ids)

    # Track construction from the quantized metric depth at the query pixel:
    # unproject along the query ray, then move rigidly with the parent quad.
    pose0 = poses[t0]
    d0 = metric[t0][pix[:, 0], pix[:, 1]]
    rays = np.concatenate([(queries - pose0.principal_point) / pose0.focal, np.ones((N, 1))], axis=1)
    p_cam0 = rays * d0[:, None]
    p_world0 = pose0.transform(p_cam0)

    tracks3d_world = np.empty((T, N, 3))
    for t in range(T):
        tracks3d_world[t] = p_world0
    for si in dyn_ids:
        surf = surfaces[si]
        sel = parent == si
        if not np.any(sel):
            continue
        R0 = np.stack([surf.e1[t0], surf.e2[t0], np.cross(surf.e1[t0], surf.e2[t0])], axis=1)
        local = (p_world0[sel] - surf.centers[t0]) @ R0  # coords in the quad frame
        for t in range(T):
            Rt = np.stack([surf.e1[t], surf.e2[t], np.cross(surf.e1[t], surf.e2[t])], axis=1)
            tracks3d_world[t, sel] = surf.centers[t] + local @ Rt.T

    tracks3d_cam = np.stack([poses[t].inverse_transform(tracks3d_world[t]) for t in range(T)])
    z = tracks3d_cam[:, :, 2]
    in_front = z > BEHIND_CAMERA_EPS
    tracks2d = np.full((T, N, 2), np.nan)
    for t in range(T):
        zt = np.where(in_front[t], z[t], 1.0)
        uv_t = poses[t].focal * tracks3d_cam[t, :, :2] / zt[:, None] + poses[t].principal_point
        tracks2d[t] = np.where(in_front[t][:, None], uv_t, np.nan)

    visibility = np.zeros((T, N), dtype=bool)
    for t in range(T):
        for i in range(N):
            if not in_front[t, i]:
                continue
            u, v = tracks2d[t, i]
            if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
                continue
            visibility[t, i] = not _segment_occluded(
                poses[t].translation, tracks3d_world[t, i], surfaces, t, int(parent[i])
            )

    depths = tuple(DepthMap(W, H, metric[t]) for t in range(T))
    depths_normalized = tuple(DepthMap(W, H, norm[t]) for t in range(T))

    gt = SceneGroundTruth(
        spec=spec,
        poses=tuple(poses),
        depths=depths,
        depths_normalized=depths_normalized,
        scale_shift=scale_shift,
        images=images,
        queries=queries,
        query_frame=t0,
        tracks2d=tracks2d,
        tracks3d_cam=tracks3d_cam,
        tracks3d_world=tracks3d_world,
        visibility=visibility,
        dynamic=dynamic,
        surfaces=tuple(surfaces),
    )
    _verify(gt)
    return gt


def _verify(gt: SceneGroundTruth) -> None:
    """Internal consistency checks; failures are generator bugs."""
    static = ~gt.dynamic
    if np.any(static):
        spread = np.ptp(gt.tracks3d_world[:, static, :], axis=0)
        assert spread.max() < 1e-12, "static world tracks drifted"
    for t, pose in enumerate(gt.poses):
        dn = gt.depths_normalized[t].values
        dm = gt.depths[t].values
        valid = dn > 0
        recon = gt.scale_shift.a * dn[valid] + gt.scale_shift.b
        assert np.array_equal(recon, dm[valid]), "depth scale-shift relation broken"
        vis = gt.visibility[t]
        if not np.any(vis):
            continue
        p_cam = pose.inverse_transform(gt.tracks3d_world[t][vis])
        proj = pose.focal * p_cam[:, :2] / p_cam[:, 2:3] + pose.principal_point
        assert np.abs(proj - gt.tracks2d[t][vis]).max() < 1e-9, "projection mismatch"
    assert np.all(gt.visibility[gt.query_frame]), "query points must be visible at the query frame"


def perturb(
    gt: SceneGroundTruth,
    pose_rot_deg: float = 0.0,
    pose_trans_frac: float = 0.0,
    depth_sigma: float = 0.0,
    track_sigma: float = 0.0,
    seed: int = 0,
) -> PerturbedInputs:
    """Degrade scene inputs with exactly controlled noise, seeded.

    Each perturbed rotation is exactly pose_rot_deg away from truth
    (random axis); each translation moves by exactly pose_trans_frac
    times the scene scale (random direction). depth_sigma is additive
    Gaussian noise on valid normalized depth pixels (clamped to stay
    valid); track_sigma likewise on the 2D/3D ground-truth tracks.
    """
    rng = np.random.default_rng(seed)
    scale = gt.scene_scale()

    poses = []
    for pose in gt.poses:
        q, t = pose.rotation, pose.translation
        if pose_rot_deg != 0.0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            q = quat_multiply(q, quat_from_rotvec(axis * np.deg2rad(pose_rot_deg)))
        if pose_trans_frac != 0.0:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            t = t + direction * (pose_trans_frac * scale)
        poses.append(CameraPose(q, t, pose.focal, pose.principal_point))

    depths = []
    for dmap in gt.depths_normalized:
        if depth_sigma > 0.0:
            noise = rng.normal(0.0, depth_sigma, size=dmap.values.shape)
            noisy = np.where(dmap.valid_mask, np.maximum(dmap.values + noise, 1e-6), 0.0)
            depths.append(DepthMap(dmap.width, dmap.height, noisy))
        else:
            depths.append(dmap)

    tracks2d = gt.tracks2d.copy()
    tracks3d = gt.tracks3d_cam.copy()
    if track_sigma > 0.0:
        tracks2d = tracks2d + rng.normal(0.0, track_sigma, size=tracks2d.shape)
        tracks3d = tracks3d + rng.normal(0.0, track_sigma, size=tracks3d.shape)

    return PerturbedInputs(tuple(poses), tuple(depths), tracks2d, tracks3d)
