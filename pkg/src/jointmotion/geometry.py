"""Camera model, pose algebra, projection, and ego-motion track synthesis.

Conventions used across the package:

* Quaternions are scalar-first ``(w, x, y, z)`` and encode the
  camera-to-world rotation.
* ``CameraPose.translation`` is the camera center in world coordinates,
  so a world point maps into the camera frame as ``R^T (p - t)``.
* Image coordinates are normalized per axis to ``[0, 1] x [0, 1]``;
  pixel ``(row, col)`` has its center at
  ``((col + 0.5) / width, (row + 0.5) / height)``.
* The intrinsic matrix uses a single dimensionless focal length in these
  normalized units together with the principal point, default ``(0.5, 0.5)``.
* Depth is the camera-frame z coordinate (not ray length), in scene units.
  Depth value 0 marks an invalid pixel everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, InvalidQuery, ShapeMismatch

# z at or below this is treated as behind the camera.
BEHIND_CAMERA_EPS = 1e-9


# ---------------------------------------------------------------------------
# Quaternion algebra (scalar-first).


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both scalar-first."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix.

    Uses the largest-diagonal branch so the square root argument stays
    well away from zero for every input rotation.
    """
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    candidates = np.array([t, R[0, 0], R[1, 1], R[2, 2]])
    which = int(np.argmax(candidates))
    if which == 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif which == 1:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif which == 2:
        s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to unit quaternion."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # First-order expansion keeps the map smooth through zero.
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return quat_normalize(q)
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Logarithm map: unit quaternion to rotation vector."""
    w, x, y, z = quat_normalize(q)
    if w < 0:
        w, x, y, z = -w, -x, -y, -z
    s = np.sqrt(x * x + y * y + z * z)
    if s < 1e-12:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * np.arctan2(s, w)
    return (angle / s) * np.array([x, y, z])


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rotate points (..., 3) by the unit quaternion q."""
    return np.asarray(points, dtype=float) @ quat_to_matrix(q).T


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of q in radians, in [0, pi]."""
    w, x, y, z = quat_normalize(q)
    return 2.0 * np.arctan2(np.sqrt(x * x + y * y + z * z), abs(w))


def rotation_angle_between(qa: np.ndarray, qb: np.ndarray) -> float:
    """Angle of the relative rotation between two unit quaternions."""
    return quat_angle(quat_multiply(quat_conjugate(qa), qb))


def quat_slerp(qa: np.ndarray, qb: np.ndarray, s: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions, s in [0, 1]."""
    qa = quat_normalize(qa)
    qb = quat_normalize(qb)
    dot = float(np.dot(qa, qb))
    if dot < 0:  # take the short arc
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(qa + s * (qb - qa))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    return (np.sin((1.0 - s) * theta) * qa + np.sin(s * theta) * qb) / np.sin(theta)


# ---------------------------------------------------------------------------
# Value types.


def _frozen_array(x, shape: tuple[int, ...]) -> np.ndarray:
    a = np.array(x, dtype=float)
    if a.shape != shape:
        raise ShapeMismatch(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world pose with intrinsics.

    ``rotation`` is a scalar-first unit quaternion, ``translation`` the
    camera center in world coordinates. ``focal`` and ``principal_point``
    live in normalized image units.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float = 1.0
    principal_point: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))

    def __post_init__(self):
        q = _frozen_array(quat_normalize(self.rotation), (4,))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,)))
        object.__setattr__(self, "principal_point", _frozen_array(self.principal_point, (2,)))
        object.__setattr__(self, "focal", float(self.focal))
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")

    @staticmethod
    def identity(focal: float = 1.0) -> "CameraPose":
        return CameraPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), focal)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """Transform composition self o other (apply other first)."""
        q = quat_multiply(self.rotation, other.rotation)
        t = quat_rotate(self.rotation, other.translation) + self.translation
        return CameraPose(q, t, other.focal, other.principal_point)

    def inverse(self) -> "CameraPose":
        qinv = quat_conjugate(self.rotation)
        return CameraPose(qinv, -quat_rotate(qinv, self.translation), self.focal, self.principal_point)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) to world coordinates."""
        return quat_rotate(self.rotation, points) + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera-frame coordinates."""
        return quat_rotate(quat_conjugate(self.rotation), np.asarray(points, dtype=float) - self.translation)


@dataclass(frozen=True)
class CameraEncoding:
    """Flat 8-vector camera representation: quaternion, center, focal."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, (8,)))


def encode_pose(pose: CameraPose) -> CameraEncoding:
    return CameraEncoding(np.concatenate([pose.rotation, pose.translation, [pose.focal]]))


def decode_pose(enc: CameraEncoding, principal_point=(0.5, 0.5)) -> CameraPose:
    v = enc.values
    return CameraPose(v[:4], v[4:7], float(v[7]), np.asarray(principal_point, dtype=float))


def encode_trajectory(poses: list[CameraPose]) -> np.ndarray:
    """Stack pose encodings into a (T, 8) array."""
    return np.stack([encode_pose(p).values for p in poses])


def decode_trajectory(values: np.ndarray, principal_point=(0.5, 0.5)) -> list[CameraPose]:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] != 8:
        raise ShapeMismatch(f"expected (T, 8) encodings, got {values.shape}")
    return [decode_pose(CameraEncoding(v), principal_point) for v in values]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth, stored (height, width). Zero marks invalid."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.height, self.width):
            raise ShapeMismatch(f"values shape {v.shape} != (height={self.height}, width={self.width})")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("depth values must be finite and >= 0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values > 0


@dataclass(frozen=True)
class ScaleShift:
    """Affine depth correction d_metric = a * d + b, a > 0."""

    a: float
    b: float

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        if not self.a > 0:
            raise ValueError(f"scale must be positive, got {self.a}")


@dataclass(frozen=True)
class PointMap:
    """Per-pixel camera-frame 3D points with a validity mask."""

    width: int
    height: int
    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=float)
        m = np.array(self.valid, dtype=bool)
        if p.shape != (self.height, self.width, 3):
            raise ShapeMismatch(f"points shape {p.shape} != (H, W, 3) for H={self.height}, W={self.width}")
        if m.shape != (self.height, self.width):
            raise ShapeMismatch(f"valid shape {m.shape} != (H, W)")
        p.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "valid", m)


# ---------------------------------------------------------------------------
# Projection model.


def apply_scale_shift(depth: DepthMap, ss: ScaleShift) -> tuple[DepthMap, int]:
    """Apply d -> a*d + b to valid pixels.

    Invalid pixels stay invalid. Valid pixels whose corrected value falls
    at or below zero are clamped to 0 (turning them invalid); the count of
    clamped pixels is returned alongside the new map.
    """
    valid = depth.valid_mask
    corrected = np.where(valid, ss.a * depth.values + ss.b, 0.0)
    clamp = valid & (corrected <= 0)
    corrected = np.where(clamp, 0.0, corrected)
    return DepthMap(depth.width, depth.height, corrected), int(np.count_nonzero(clamp))


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) grid of normalized pixel-center coordinates (u, v)."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def project_points(points_world: np.ndarray, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3) without raising.

    Returns (uv, z) where z is camera-frame depth; entries with
    z <= BEHIND_CAMERA_EPS produce non-finite uv and must be masked by
    the caller.
    """
    p_cam = pose.inverse_transform(points_world)
    z = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = pose.focal * p_cam[..., :2] / z[..., None] + pose.principal_point
        uv = np.where(z[..., None] > BEHIND_CAMERA_EPS, uv, np.nan)
    return uv, z


def project(point_world: np.ndarray, pose: CameraPose) -> tuple[np.ndarray, float]:
    """Project one world point to normalized image coordinates.

    Returns (uv, depth). Raises BehindCamera when the camera-frame z is
    at or below BEHIND_CAMERA_EPS.
    """
    p_cam = pose.inverse_transform(np.asarray(point_world, dtype=float))
    z = float(p_cam[2])
    if z <= BEHIND_CAMERA_EPS:
        raise BehindCamera(f"point has camera-frame z = {z}")
    uv = pose.focal * p_cam[:2] / z + pose.principal_point
    return uv, z


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Camera-frame points for normalized pixels (..., 2) at given depths."""
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    rays = np.concatenate(
        [(uv - pose.principal_point) / pose.focal, np.ones(uv.shape[:-1] + (1,))], axis=-1
    )
    return depth[..., None] * rays


def unproject(depth: DepthMap, pose: CameraPose) -> tuple[PointMap, np.ndarray]:
    """Lift a depth map to camera-frame and world-frame point grids.

    Returns (PointMap in camera frame, world points (H, W, 3)). Invalid
    depth pixels yield zero camera points and are masked out.
    """
    uv = pixel_centers(depth.width, depth.height)
    p_cam = unproject_pixels(uv, depth.values, pose)
    world = pose.transform(p_cam)
    return PointMap(depth.width, depth.height, p_cam, depth.valid_mask), world


def query_pixel_indices(queries: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Map normalized query coordinates (N, 2) to containing pixel indices."""
    q = np.asarray(queries, dtype=float)
    cols = np.clip(np.floor(q[:, 0] * width).astype(int), 0, width - 1)
    rows = np.clip(np.floor(q[:, 1] * height).astype(int), 0, height - 1)
    return rows, cols


def ego_motion_tracks(
    queries: np.ndarray,
    depths: list[DepthMap],
    poses: list[CameraPose],
    query_frame: int = 0,
) -> np.ndarray:
    """Camera-motion-only track hypothesis for static query points.

    Each query pixel is unprojected at ``query_frame`` using that frame's
    aligned (metric) depth map, lifted to world coordinates, and
    re-expressed in every frame's camera coordinates. The result is a
    (T, N, 3) array of camera-frame positions; it is exact for static
    world points and serves as the anchor hypothesis for everything that
    moves.

    Depth lookup uses the pixel containing the query. Raises InvalidQuery
    if that pixel has no valid depth.
    """
    queries = np.asarray(queries, dtype=float)
    if queries.ndim != 2 or queries.shape[1] != 2:
        raise ShapeMismatch(f"queries must be (N, 2), got {queries.shape}")
    if len(depths) != len(poses):
        raise ShapeMismatch(f"{len(depths)} depth maps vs {len(poses)} poses")
    if not 0 <= query_frame < len(poses):
        raise ValueError(f"query_frame {query_frame} out of range for {len(poses)} frames")

    dmap = depths[query_frame]
    rows, cols = query_pixel_indices(queries, dmap.width, dmap.height)
    d = dmap.values[rows, cols]
    bad = np.nonzero(d <= 0)[0]
    if bad.size:
        raise InvalidQuery(f"queries {bad.tolist()} fall on invalid depth at frame {query_frame}")

    anchor_pose = poses[query_frame]
    p_cam0 = unproject_pixels(queries, d, anchor_pose)
    p_world = anchor_pose.transform(p_cam0)
    return np.stack([pose.inverse_transform(p_world) for pose in poses])


def camera_tracks_to_world(tracks3d: np.ndarray, poses: list[CameraPose]) -> np.ndarray:
    """Map per-frame camera-frame tracks (T, N, 3) to world coordinates."""
    tracks3d = np.asarray(tracks3d, dtype=float)
    if tracks3d.shape[0] != len(poses):
        raise ShapeMismatch(f"{tracks3d.shape[0]} track frames vs {len(poses)} poses")
    return np.stack([pose.transform(tracks3d[t]) for t, pose in enumerate(poses)])


def world_points_to_camera_tracks(points_world: np.ndarray, poses: list[CameraPose]) -> np.ndarray:
    """Express fixed world points (N, 3) in every frame's camera coordinates."""
    return np.stack([pose.inverse_transform(points_world) for pose in poses])
