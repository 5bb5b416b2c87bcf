"""Synthetic depth camera: raycast rendering of table, boxes and arm capsules.

Every pixel casts one ray through its integer coordinate (matching the
backprojection convention in :mod:`reactive_grasp.geometry`, so a rendered
depth image lifts back to the exact surface points).  Ray directions have
unit z in the camera frame, which makes the ray parameter of a hit equal to
its camera-frame depth.  The nearest hit among the table plane, the object
boxes and the robot's capsules wins; intensity is lambertian,
albedo * max(0, normal . light), with per-face albedos drawn from the seed
so each object face has a stable, distinguishable appearance.

Each primitive is only evaluated inside a conservative pixel rectangle
around its projection, so full-resolution frames stay cheap even with the
whole arm in view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BehindCameraError, CameraModel, Cuboid, Pose, project_bbox
from .scene import SceneState

__all__ = ["RenderConfig", "FrameBundle", "render", "ray_box_hits"]


@dataclass(frozen=True)
class RenderConfig:
    light: tuple = (0.45, 0.3, 0.85)
    table_albedo: float = 0.4
    checker: bool = False          # modulate box faces with a dark/light checker
    checker_size: float = 0.02
    seed: int = 0                  # per-face and per-link albedo draws

    def light_dir(self) -> np.ndarray:
        v = np.asarray(self.light, dtype=float)
        return v / np.linalg.norm(v)


@dataclass
class FrameBundle:
    """One camera frame plus the simulator's ground truth for it."""

    tick: int
    intensity: np.ndarray      # (H, W) in [0, 1]
    depth: np.ndarray          # (H, W) meters, +inf where no surface
    object_poses: list         # ground-truth Pose per scene object

    def __post_init__(self):
        if self.intensity.shape != self.depth.shape:
            raise ValueError("intensity and depth must be pixel-aligned")


def _face_albedos(seed: int, index: int) -> np.ndarray:
    return np.random.default_rng([seed, index]).uniform(0.35, 0.95, 6)


def _link_albedo(seed: int, link: int) -> float:
    return float(np.random.default_rng([seed, 1000 + link]).uniform(0.45, 0.75))


def ray_box_hits(origin: np.ndarray, dirs: np.ndarray, box: Cuboid):
    """Slab-method ray/box intersection for a batch of rays.

    Returns (t, axis, sign, local_point): the entry parameter (+inf on miss),
    the local face axis, the face sign, and the local hit coordinates.
    """
    dirs = np.atleast_2d(dirs)
    R = box.pose.rotation
    ol = R.T @ (origin - box.pose.translation)
    dl = dirs @ R
    dl_safe = np.where(np.abs(dl) < 1e-300, 1e-300, dl)
    t1 = (-box.half_extents - ol) / dl_safe
    t2 = (box.half_extents - ol) / dl_safe
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    tn = near.max(axis=1)
    tf = far.min(axis=1)
    hit = (tf >= tn) & (tn > 1e-9)
    t = np.where(hit, tn, np.inf)
    axis = near.argmax(axis=1)
    rows = np.arange(len(dirs))
    sign = -np.sign(dl_safe[rows, axis])
    local = ol + np.where(hit, t, 0.0)[:, None] * dl
    return t, axis, sign, local


def _ray_capsule(origin, dirs, p0, p1, radius):
    """Nearest positive hit parameter and surface normal per ray (+inf on miss)."""
    n = len(dirs)
    t_best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    seg = p1 - p0
    length = float(np.linalg.norm(seg))
    a = origin - p0

    if length > 1e-12:
        u = seg / length
        d_par = dirs @ u
        a_par = float(a @ u)
        d_perp = dirs - d_par[:, None] * u
        a_perp = a - a_par * u
        A = np.einsum("ij,ij->i", d_perp, d_perp)
        B = 2.0 * (d_perp @ a_perp)
        C = float(a_perp @ a_perp) - radius * radius
        disc = B * B - 4.0 * A * C
        ok = (disc >= 0) & (A > 1e-18)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (-B - sq) / (2.0 * A)
        s = a_par + t * d_par
        ok &= (t > 1e-9) & (s >= 0.0) & (s <= length)
        t_best = np.where(ok, t, np.inf)
        with np.errstate(invalid="ignore"):
            hitp = origin + np.where(ok, t_best, 0.0)[:, None] * dirs
        axis_pt = p0 + np.clip(s, 0.0, length)[:, None] * u
        with np.errstate(invalid="ignore"):
            nrm = (hitp - axis_pt) / radius
        normal = np.where(ok[:, None], nrm, 0.0)

    for center in (p0, p1):
        ac = origin - center
        A = np.einsum("ij,ij->i", dirs, dirs)
        B = 2.0 * (dirs @ ac)
        C = float(ac @ ac) - radius * radius
        disc = B * B - 4.0 * A * C
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = (-B - sq) / (2.0 * A)
        ok &= (t > 1e-9) & (t < t_best)
        t_best = np.where(ok, t, t_best)
        with np.errstate(invalid="ignore"):
            hitp = origin + np.where(ok, t_best, 0.0)[:, None] * dirs
            nrm = (hitp - center) / radius
        normal = np.where(ok[:, None], nrm, normal)

    return t_best, normal


def _pixel_rect(camera: CameraModel, points: np.ndarray, radius: float):
    """Conservative pixel rectangle covering spheres of ``radius`` at ``points``."""
    uv, z = camera.project(points)
    if np.any(z <= 1e-6):
        return 0, camera.height, 0, camera.width
    f = max(camera.intrinsics[0, 0], camera.intrinsics[1, 1])
    pr = f * radius / z.min() + 2.0
    x0 = int(np.floor(uv[:, 0].min() - pr))
    x1 = int(np.ceil(uv[:, 0].max() + pr)) + 1
    y0 = int(np.floor(uv[:, 1].min() - pr))
    y1 = int(np.ceil(uv[:, 1].max() + pr)) + 1
    return (max(y0, 0), min(y1, camera.height), max(x0, 0), min(x1, camera.width))


def _box_rect(camera: CameraModel, box: Cuboid):
    try:
        r = project_bbox(box, camera)
    except BehindCameraError:
        return 0, camera.height, 0, camera.width
    return (max(int(np.floor(r.y0)) - 1, 0), min(int(np.ceil(r.y1)) + 1, camera.height),
            max(int(np.floor(r.x0)) - 1, 0), min(int(np.ceil(r.x1)) + 1, camera.width))


def render(scene: SceneState, camera: CameraModel | None = None, tick: int = 0,
           config: RenderConfig | None = None) -> FrameBundle:
    """Raycast the scene into a depth and a shaded intensity image."""
    camera = camera or scene.camera
    if camera is None:
        raise ValueError("no camera: pass one or set scene.camera")
    config = config or RenderConfig()
    H, W = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    origin, dirs = camera.pixel_rays(uu.ravel(), vv.ravel())
    dirs = dirs.reshape(H, W, 3)
    light = config.light_dir()

    depth = np.full((H, W), np.inf)
    normal = np.zeros((H, W, 3))
    albedo = np.zeros((H, W))

    # table plane z = 0
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = -origin[2] / dz
    hit = t_table > 1e-9
    depth[hit] = t_table[hit]
    normal[hit] = (0.0, 0.0, 1.0)
    albedo[hit] = config.table_albedo

    for i, box in enumerate(scene.objects):
        y0, y1, x0, x1 = _box_rect(camera, box)
        if y1 <= y0 or x1 <= x0:
            continue
        sub = dirs[y0:y1, x0:x1].reshape(-1, 3)
        t, axis, sign, local = ray_box_hits(origin, sub, box)
        d_sub = depth[y0:y1, x0:x1]
        closer = (t < d_sub.ravel())
        if not closer.any():
            continue
        idx = np.nonzero(closer)[0]
        face = (2 * axis[idx] + (sign[idx] > 0)).astype(int)
        shade = _face_albedos(config.seed, i)[face]
        if config.checker:
            others = np.array([[1, 2], [0, 2], [0, 1]])[axis[idx]]
            ab = np.take_along_axis(local[idx], others, axis=1)
            parity = (np.floor(ab[:, 0] / config.checker_size)
                      + np.floor(ab[:, 1] / config.checker_size)) % 2
            shade = shade * np.where(parity > 0.5, 1.0, 0.55)
        m = closer.reshape(d_sub.shape)
        d_sub[m] = t[idx]
        normal[y0:y1, x0:x1][m] = (box.pose.rotation[:, axis[idx]] * sign[idx]).T
        albedo[y0:y1, x0:x1][m] = shade

    if scene.robot is not None:
        fk = scene.robot.fk(scene.q)
        p0s, p1s = scene.robot.capsule_endpoints(fk)
        for k, cap in enumerate(scene.robot.capsules):
            if cap.grasp_volume:
                continue   # jaw sweep region, not a solid; the jaws are thin
            y0, y1, x0, x1 = _pixel_rect(camera, np.stack([p0s[k], p1s[k]]), cap.radius)
            if y1 <= y0 or x1 <= x0:
                continue
            sub = dirs[y0:y1, x0:x1].reshape(-1, 3)
            t, nrm = _ray_capsule(origin, sub, p0s[k], p1s[k], cap.radius)
            d_sub = depth[y0:y1, x0:x1]
            closer = (t < d_sub.ravel())
            if not closer.any():
                continue
            idx = np.nonzero(closer)[0]
            m = closer.reshape(d_sub.shape)
            d_sub[m] = t[idx]
            normal[y0:y1, x0:x1][m] = nrm[idx]
            albedo[y0:y1, x0:x1][m] = _link_albedo(config.seed, cap.link)

    intensity = albedo * np.maximum(normal @ light, 0.0)
    return FrameBundle(tick, intensity, depth,
                       [box.pose for box in scene.objects])
