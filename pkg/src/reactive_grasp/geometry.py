"""Rigid-body math, camera projection, pointcloud containers and error metrics.

Conventions used everywhere in this package:

* World and camera frames are right-handed; the camera looks along +z.
* Depth/intensity images are row-major numpy arrays indexed ``img[v, u]``
  with ``v`` the row and ``u`` the column.  A pixel's ray passes through
  the integer coordinate ``(u, v)``, so ``backproject`` after ``project``
  is the identity on integer pixel centers.
* Depth is the z-coordinate of the hit point in the camera frame (not the
  ray length).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose",
    "PointCloud",
    "CameraModel",
    "Cuboid",
    "Rect",
    "BehindCameraError",
    "so3_exp",
    "so3_log",
    "backproject",
    "voxel_filter",
    "geodesic_error",
    "look_at",
    "intrinsics_from_fov",
    "project_bbox",
    "save_depth_image",
    "load_depth_image",
]


class BehindCameraError(ValueError):
    """A point that must be projected lies at or behind the camera plane."""


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula: rotation vector (3,) to rotation matrix (3,3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])
    if theta < 1e-10:
        # second-order series, exact enough below the cutoff
        return np.eye(3) + K + 0.5 * (K @ K)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation matrix (3,3) to rotation vector (3,). Inverse of so3_exp."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part degenerates; recover axis from R + I
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        # fix signs using the largest component
        k = int(np.argmax(axis))
        sign = np.ones(3)
        for i in range(3):
            if i != k and M[k, i] < 0:
                sign[i] = -1.0
        axis = axis * sign
        axis /= np.linalg.norm(axis)
        return axis * theta
    return theta / (2.0 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3): ``x_world = rotation @ x_local + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return Pose(so3_exp(axis * angle), np.asarray(translation, dtype=float))

    @staticmethod
    def from_quaternion(q, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Quaternion in (w, x, y, z) order; normalized on entry."""
        q = np.asarray(q, dtype=float)
        q = q / np.linalg.norm(q)
        w, x, y, z = q
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        return Pose(R, np.asarray(translation, dtype=float))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a (3,) point or (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
        )

    def orthonormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) (nearest in Frobenius norm)."""
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            U[:, -1] *= -1.0
            R = U @ Vt
        return Pose(R, self.translation)


@dataclass
class PointCloud:
    """3D points (N, 3) in meters with optional per-point 3x3 covariances (N, 3, 3)."""

    points: np.ndarray
    covariances: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.covariances is not None:
            self.covariances = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
            if len(self.covariances) != len(self.points):
                raise ValueError(
                    f"covariance count {len(self.covariances)} != point count {len(self.points)}"
                )
        if not np.all(np.isfinite(self.points)):
            raise ValueError("pointcloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        pts = pose.apply(self.points)
        covs = None
        if self.covariances is not None:
            R = pose.rotation
            covs = np.einsum("ij,njk,lk->nil", R, self.covariances, R)
        return PointCloud(pts, covs)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle, half-open in spirit: [x0, x1] x [y0, y1]."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return max(0.0, self.x1 - self.x0)

    @property
    def height(self) -> float:
        return max(0.0, self.y1 - self.y0)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def clamped(self, width: int, height: int) -> "Rect":
        return Rect(
            min(max(self.x0, 0.0), float(width)),
            min(max(self.y0, 0.0), float(height)),
            min(max(self.x1, 0.0), float(width)),
            min(max(self.y1, 0.0), float(height)),
        )

    def scaled(self, factor: float) -> "Rect":
        cx, cy = self.center
        hw = 0.5 * self.width * factor
        hh = 0.5 * self.height * factor
        return Rect(cx - hw, cy - hh, cx + hw, cy + hh)

    def shifted(self, dx: float, dy: float) -> "Rect":
        return Rect(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def union(self, other: "Rect") -> "Rect":
        return Rect(min(self.x0, other.x0), min(self.y0, other.y0),
                    max(self.x1, other.x1), max(self.y1, other.y1))

    def to_slices(self) -> tuple[slice, slice]:
        """Integer (row, col) slices covering the rectangle."""
        return (
            slice(int(np.floor(self.y0)), int(np.ceil(self.y1))),
            slice(int(np.floor(self.x0)), int(np.ceil(self.x1))),
        )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: upper-triangular intrinsics, camera-to-world extrinsics."""

    intrinsics: np.ndarray
    extrinsics: Pose
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=float).reshape(3, 3)
        object.__setattr__(self, "intrinsics", K)
        if not np.allclose(K, np.triu(K)):
            raise ValueError("intrinsics must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (N, 3) -> pixel coordinates (N, 2) as (u, v), plus camera-frame z (N,)."""
        pts = np.atleast_2d(np.asarray(points_world, dtype=float))
        cam = self.extrinsics.inverse().apply(pts)
        z = cam[:, 2]
        uvw = cam @ self.intrinsics.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = uvw[:, :2] / uvw[:, 2:3]
        return uv, z

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-frame ray origins/directions through pixels (u, v); directions have unit z in camera frame."""
        ones = np.ones_like(np.asarray(u, dtype=float))
        pix = np.stack([np.asarray(u, dtype=float), np.asarray(v, dtype=float), ones], axis=-1)
        Kinv = np.linalg.inv(self.intrinsics)
        dirs_cam = pix @ Kinv.T
        dirs_world = dirs_cam @ self.extrinsics.rotation.T
        origin = self.extrinsics.translation
        return origin, dirs_world


@dataclass(frozen=True)
class Cuboid:
    """Oriented box: center-frame pose, axes along the edges, strictly positive half extents."""

    pose: Pose
    half_extents: np.ndarray

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        if np.any(he <= 0):
            raise ValueError("half_extents must be strictly positive")
        object.__setattr__(self, "half_extents", he)

    @property
    def diagonal(self) -> float:
        """Full space diagonal of the box."""
        return float(2.0 * np.linalg.norm(self.half_extents))

    def corners(self) -> np.ndarray:
        """(8, 3) world-frame corner positions."""
        signs = np.array([
            [sx, sy, sz]
            for sx in (-1.0, 1.0)
            for sy in (-1.0, 1.0)
            for sz in (-1.0, 1.0)
        ])
        return self.pose.apply(signs * self.half_extents)

    def contains(self, points_world: np.ndarray, tol: float = 0.0) -> np.ndarray:
        local = self.pose.inverse().apply(np.atleast_2d(points_world))
        return np.all(np.abs(local) <= self.half_extents + tol, axis=-1)


def backproject(depth: np.ndarray, mask: np.ndarray, camera: CameraModel) -> PointCloud:
    """Lift masked depth pixels to a world-frame pointcloud.

    Pixel (u, v) with depth d maps through the inverse intrinsics to the
    camera-frame point ``K^-1 (u*d, v*d, d)`` and then through the
    camera-to-world extrinsics.  One point per masked pixel, in row-major
    pixel order.

    Raises:
        ValueError: if any masked depth value is non-finite or <= 0.
    """
    depth = np.asarray(depth, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != mask.shape:
        raise ValueError(f"depth shape {depth.shape} != mask shape {mask.shape}")
    v, u = np.nonzero(mask)
    if len(v) == 0:
        return PointCloud(np.zeros((0, 3)))
    d = depth[v, u]
    bad = ~np.isfinite(d) | (d <= 0)
    if np.any(bad):
        raise ValueError(
            f"{int(bad.sum())} masked depth pixels are non-finite or non-positive "
            f"(first at row={v[bad][0]}, col={u[bad][0]})"
        )
    Kinv = np.linalg.inv(camera.intrinsics)
    pix = np.stack([u * d, v * d, d], axis=-1)
    cam_pts = pix @ Kinv.T
    return PointCloud(camera.extrinsics.apply(cam_pts))


def voxel_filter(cloud: PointCloud, leaf: float) -> PointCloud:
    """Replace all points in each cubic cell of side ``leaf`` with their centroid.

    Cells are keyed by ``floor(coordinate / leaf)``, so boundary points land in
    the lower cell.  Output points are ordered by lexicographic voxel key,
    which makes the filter deterministic and idempotent.
    """
    if leaf <= 0:
        raise ValueError(f"leaf must be > 0, got {leaf}")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, cloud.points)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    return PointCloud(sums / counts[:, None])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with z toward ``target`` and image rows running downward."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / nz
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("view direction is parallel to up")
    x = x / nx
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


def intrinsics_from_fov(width: int, height: int, fov_x_deg: float) -> np.ndarray:
    """Square-pixel pinhole matrix with the given horizontal field of view."""
    f = width / (2.0 * np.tan(np.radians(fov_x_deg) / 2.0))
    return np.array([
        [f, 0.0, width / 2.0],
        [0.0, f, height / 2.0],
        [0.0, 0.0, 1.0],
    ])


def geodesic_error(a: Pose, b: Pose) -> float:
    """Angular distance between two rotations: arccos((trace(Ra Rb^T) - 1) / 2), in [0, pi]."""
    c = (np.trace(a.rotation @ b.rotation.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def project_bbox(cuboid: Cuboid, camera: CameraModel) -> Rect:
    """Minimal axis-aligned pixel rectangle over the 8 projected box corners.

    The result is clamped to the image bounds (so it may have zero area when
    the box projects fully outside the frame).

    Raises:
        BehindCameraError: if any corner has camera-frame depth <= 0.
    """
    uv, z = camera.project(cuboid.corners())
    if np.any(z <= 0):
        raise BehindCameraError("cuboid corner at or behind the camera plane")
    rect = Rect(uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())
    return rect.clamped(camera.width, camera.height)


def save_depth_image(path, depth: np.ndarray) -> None:
    """Binary depth format: little-endian u32 width, u32 height, then row-major f32 meters."""
    depth = np.asarray(depth, dtype=np.float32)
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(depth.astype("<f4").tobytes())


def load_depth_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"depth file truncated: expected {w * h} floats, got {data.size}")
    return data.reshape(h, w).astype(np.float64)
