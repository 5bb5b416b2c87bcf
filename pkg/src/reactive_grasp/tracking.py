"""6-DoF object tracking that fuses 2D template matching with depth registration.

Objects are found once by background subtraction in a top-down depth image.
After that, every frame runs the same loop: the template matcher localizes
the object in the intensity image and yields a segmentation mask, the masked
depth pixels are lifted to a world-frame pointcloud, and Generalized-ICP
aligns the immutable template cloud to it starting from a pose prior.  The
prior is the previous pose while the object moves freely; once the gripper
closes on it the prior comes from forward kinematics of the hand instead,
so the crop window keeps up with arm motion that the matcher alone could
not follow.

Tracking loss is a status, never an exception: the pose is held (or, in
hand, carried along with the arm) and the search window grows each lost
frame until the matcher reacquires the object.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import (
    BehindCameraError,
    CameraModel,
    Cuboid,
    PointCloud,
    Pose,
    Rect,
    backproject,
    geodesic_error,
    project_bbox,
    voxel_filter,
)
from .registration import (
    InsufficientPointsError,
    NoOverlapError,
    RegistrationConfig,
    estimate_covariances,
    register,
)
from .thor import MatcherConfig, Template, TemplateModule, depth_interval_mask, match

__all__ = [
    "Detection",
    "TrackerConfig",
    "TrackerState",
    "InitializationError",
    "detect_objects",
    "initialize",
    "step",
    "set_in_hand",
    "set_free",
    "write_metrics_csv",
    "LatestWinsMailbox",
]

# history row statuses, in rough order of health
STATUS_OK = "ok"
STATUS_LOST = "lost"
STATUS_NO_OVERLAP = "no-overlap"


class InitializationError(RuntimeError):
    """The initial mask was empty or too small to build a template cloud."""


@dataclass(frozen=True)
class Detection:
    """One background-subtraction cluster: world-frame box and its image footprint."""

    cuboid: Cuboid
    bbox: Rect
    pixel_count: int


@dataclass(frozen=True)
class TrackerConfig:
    voxel_leaf: float = 0.01
    height_threshold: float = 0.005   # reject table pixels this close to z = 0
    min_mask_pixels: int = 12
    depth_margin: float = 0.05       # slack around the predicted depth interval
    containment_tol: float = 0.04    # mask points must lie this close to the predicted box
    min_fitness: float = 0.25        # registration inlier fraction below this counts as lost
    min_contained: float = 0.75      # observed points the aligned box must explain
    max_frame_jump: float = 0.05     # largest believable single-frame translation
    hand_exclusion: float = 0.06     # reacquisition ignores blobs this close to the hand
    min_blob_fraction: float = 0.2   # of the prior footprint a reacquired blob must cover
    stm_period: int = 10
    ltm_lower_bound: float = 0.8
    history_length: int = 4096
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def __post_init__(self):
        if self.voxel_leaf <= 0:
            raise ValueError("voxel_leaf must be > 0")
        if self.min_mask_pixels < 4:
            raise ValueError("min_mask_pixels must be >= 4")
        if self.max_frame_jump <= 0:
            raise ValueError("max_frame_jump must be > 0")
        if self.stm_period < 1:
            raise ValueError("stm_period must be >= 1")


@dataclass
class HistoryRow:
    frame_index: int
    pose: Pose
    score: float
    status: str
    t_err: float = float("nan")
    r_err: float = float("nan")


@dataclass
class TrackerState:
    """Everything the per-frame loop reads and writes for one tracked object.

    ``template_cloud`` holds one object-frame point per initial mask pixel and
    never changes after :func:`initialize`; ``registration_template`` is its
    voxel-filtered copy with precomputed covariances, estimated once because
    the source side of every registration is the same cloud.
    """

    template_cloud: PointCloud
    registration_template: PointCloud
    template_module: TemplateModule
    current_pose: Pose
    bbox: Rect
    half_extents: np.ndarray
    camera: CameraModel
    config: TrackerConfig
    initial_pose: Pose
    mode: str = "free"
    grasp_offset: Pose | None = None
    frame_index: int = 0
    score: float = 1.0
    last_status: str = STATUS_OK
    lost_streak: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=4096))

    @property
    def lost(self) -> bool:
        return self.last_status != STATUS_OK


def _foreground_mask(depth: np.ndarray, background: np.ndarray, threshold: float) -> np.ndarray:
    bg = np.where(np.isfinite(background), background, np.inf)
    return np.isfinite(depth) & (bg - depth > threshold)


def detect_objects(
    topdown_depth: np.ndarray,
    background: np.ndarray,
    camera: CameraModel,
    threshold: float = 0.01,
    min_pixels: int = 25,
) -> list[Detection]:
    """Find tabletop objects by depth background subtraction.

    Pixels closer than the empty-table background by more than ``threshold``
    are clustered with 8-connected components; each cluster of at least
    ``min_pixels`` pixels becomes an axis-aligned world-frame cuboid.  The
    camera never sees an underside, so the vertical extent runs from the
    support plane z = 0 up to the highest backprojected point.  Detections
    are sorted largest cluster first.
    """
    fg = _foreground_mask(np.asarray(topdown_depth, dtype=float),
                          np.asarray(background, dtype=float), threshold)
    labels, count = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    detections = []
    for lab in range(1, count + 1):
        mask = labels == lab
        n = int(mask.sum())
        if n < min_pixels:
            continue
        pts = backproject(topdown_depth, mask, camera).points
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        half = np.maximum((hi - lo) / 2.0, 5e-3)
        half[2] = max(hi[2] / 2.0, 5e-3)
        center = np.array([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, hi[2] / 2.0])
        rows, cols = np.nonzero(mask)
        bbox = Rect(float(cols.min()), float(rows.min()),
                    float(cols.max() + 1), float(rows.max() + 1))
        detections.append(Detection(Cuboid(Pose(np.eye(3), center), half), bbox, n))
    detections.sort(key=lambda d: -d.pixel_count)
    return detections


def _height_mask(depth: np.ndarray, bbox: Rect, camera: CameraModel,
                 threshold: float) -> np.ndarray:
    """Pixels inside the box whose backprojected world point sits above the table."""
    mask = np.zeros(depth.shape, dtype=bool)
    rows, cols = bbox.to_slices()
    sub = depth[rows, cols]
    valid = np.isfinite(sub) & (sub > 0)
    if not valid.any():
        return mask
    vs, us = np.nonzero(valid)
    vs = vs + rows.start
    us = us + cols.start
    d = depth[vs, us]
    Kinv = np.linalg.inv(camera.intrinsics)
    cam_pts = np.stack([us * d, vs * d, d], axis=-1) @ Kinv.T
    z_world = cam_pts @ camera.extrinsics.rotation[2] + camera.extrinsics.translation[2]
    keep = z_world > threshold
    mask[vs[keep], us[keep]] = True
    return mask


def initialize(
    intensity: np.ndarray,
    depth: np.ndarray,
    detection: Detection,
    camera: CameraModel,
    config: TrackerConfig | None = None,
) -> TrackerState:
    """Build a tracker from the first frame of a detected object.

    All ten template slots start as the initial crop, and the template cloud
    is the detection mask backprojected into the object frame of the
    detection pose (one point per mask pixel).

    Raises:
        InitializationError: if fewer than ``min_mask_pixels`` pixels survive
            the height filter inside the detection box.
    """
    config = config or TrackerConfig()
    mask = _height_mask(np.asarray(depth, dtype=float), detection.bbox, camera,
                        config.height_threshold)
    mask &= np.isfinite(depth)
    if int(mask.sum()) < config.min_mask_pixels:
        raise InitializationError(
            f"initial mask has {int(mask.sum())} pixels, "
            f"need {config.min_mask_pixels}")
    world = backproject(depth, mask, camera)
    # the detection footprint can graze background structures; only points
    # the detected box itself explains belong in the template
    inside = detection.cuboid.contains(world.points, tol=config.containment_tol)
    if int(inside.sum()) < config.min_mask_pixels:
        raise InitializationError(
            f"initial mask has {int(inside.sum())} pixels inside the "
            f"detected box, need {config.min_mask_pixels}")
    world = PointCloud(world.points[inside])
    template_cloud = world.transformed(detection.cuboid.pose.inverse())
    reg_template = _surface_model(template_cloud.points, config.voxel_leaf,
                                  config.registration)
    if len(reg_template) < 5:
        raise InitializationError("template cloud too small after voxel filtering")

    init_patch = Template.from_patch(
        _crop(intensity, detection.bbox), source_frame=0)
    module = TemplateModule.initialize(
        init_patch, lower_bound=config.ltm_lower_bound, stm_period=config.stm_period)

    state = TrackerState(
        template_cloud=template_cloud,
        registration_template=reg_template,
        template_module=module,
        current_pose=detection.cuboid.pose,
        bbox=detection.bbox,
        half_extents=detection.cuboid.half_extents.copy(),
        camera=camera,
        config=config,
        initial_pose=detection.cuboid.pose,
        history=deque(maxlen=config.history_length),
    )
    state.history.append(HistoryRow(0, state.current_pose, 1.0, STATUS_OK, 0.0, 0.0))
    return state


def _crop(image: np.ndarray, bbox: Rect) -> np.ndarray:
    rows, cols = bbox.to_slices()
    return np.asarray(image, dtype=float)[rows, cols]


def _surface_model(points: np.ndarray, leaf: float,
                   config: RegistrationConfig) -> PointCloud:
    """Voxel representatives carrying covariances from the full-density cloud.

    Normals estimated after downsampling are unusable on small objects: a
    20-neighborhood of the thinned cloud wraps around box edges.  Estimating
    on the raw pixel cloud and transferring each representative the
    covariance of its nearest raw point keeps the plane directions honest.
    """
    raw = PointCloud(np.asarray(points, dtype=float))
    dense = estimate_covariances(raw, min(config.covariance_k, len(raw)),
                                 config.epsilon_plane)
    reps = voxel_filter(raw, leaf)
    _, idx = cKDTree(dense.points).query(reps.points, workers=1)
    return PointCloud(reps.points, dense.covariances[idx])


def _camera_depth_of(pose: Pose, camera: CameraModel) -> float:
    cam = camera.extrinsics.inverse().apply(pose.translation[None, :])
    return float(cam[0, 2])


def _predicted_pose(state: TrackerState, ee_pose: Pose | None) -> Pose:
    if state.mode == "in-hand":
        if ee_pose is None:
            raise ValueError("in-hand tracking requires the end-effector pose")
        return ee_pose @ state.grasp_offset
    return state.current_pose


def _reacquire_blob(depth: np.ndarray, mask: np.ndarray, height_keep: np.ndarray,
                    state: TrackerState, config: TrackerConfig,
                    ee_pos: np.ndarray | None = None,
                    window: Rect | None = None):
    """World points of the largest mask component that fits the object.

    Mask pixels above the support plane are grouped by 8-connectivity; a
    component qualifies when its spatial extent does not exceed the
    template box diagonal plus containment slack.  Oversized blobs (a
    neighboring obstacle, or the object merged with one) are skipped so the
    tracker keeps searching rather than locking onto the wrong surface.

    A component touching the search window border is a fragment of
    something larger, so its measured extent is meaningless; it is skipped
    too, and the window keeps growing until the surface is seen whole (and
    rejected for size) or the object comes in view.  Components are also
    held to a fraction of the prior footprint's pixel area: the depth gate
    can carve a small table-resting sliver out of a big surface, and pixel
    count is what separates such a sliver from the object itself.

    A freely moving object rests on the support plane, so a component must
    also reach below one box height and must not rise past two: that drops
    tall surfaces and clusters in mid-air.  The gripper is the one mid-air
    cluster that can reach the table, so anything centered within
    ``hand_exclusion`` of the known end-effector position is skipped
    outright.
    """
    v, u = np.nonzero(mask)
    good = np.zeros_like(mask)
    good[v[height_keep], u[height_keep]] = True
    labels, n = ndimage.label(good, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return None
    he = state.half_extents
    limit = 2.0 * float(np.linalg.norm(he)) + 2.0 * config.containment_tol
    z_limit = 2.0 * float(he[2]) + 2.0 * config.containment_tol
    min_count = max(config.min_mask_pixels,
                    int(config.min_blob_fraction * state.bbox.area))
    border = None
    if window is not None:
        rows, cols = window.to_slices()
        r0, r1 = rows.start, rows.stop - 1
        c0, c1 = cols.start, cols.stop - 1
        if not (r0 <= 0 and c0 <= 0 and r1 >= mask.shape[0] - 1
                and c1 >= mask.shape[1] - 1):
            border = (r0, r1, c0, c1)
    best = None
    for index in range(1, n + 1):
        comp = labels == index
        count = int(comp.sum())
        if count < min_count:
            continue
        if border is not None:
            cv, cu = np.nonzero(comp)
            r0, r1, c0, c1 = border
            if (cv.min() <= r0 or cv.max() >= r1
                    or cu.min() <= c0 or cu.max() >= c1):
                continue
        pts = backproject(depth, comp, state.camera).points
        span = pts.max(axis=0) - pts.min(axis=0)
        if float(np.linalg.norm(span)) > limit or float(span[2]) > z_limit:
            continue
        if float(pts[:, 2].min()) > float(he[2]):
            continue
        if (ee_pos is not None
                and float(np.linalg.norm(pts.mean(axis=0) - ee_pos))
                < config.hand_exclusion):
            continue
        if best is None or count > best[0]:
            best = (count, pts)
    return None if best is None else best[1]


def _hold(state: TrackerState, pose: Pose, bbox: Rect, status: str,
          frame_index: int, score: float, truth: Pose | None) -> Pose:
    state.current_pose = pose
    state.bbox = bbox
    state.last_status = status
    state.score = score
    state.lost_streak += 1
    state.frame_index = frame_index
    _record(state, frame_index, score, status, truth)
    return pose


def _record(state: TrackerState, frame_index: int, score: float, status: str,
            truth: Pose | None) -> None:
    t_err = r_err = float("nan")
    if truth is not None:
        t_err = float(np.linalg.norm(state.current_pose.translation - truth.translation))
        r_err = geodesic_error(state.current_pose, truth)
    state.history.append(HistoryRow(frame_index, state.current_pose, score, status,
                                    t_err, r_err))


def step(
    state: TrackerState,
    intensity: np.ndarray,
    depth: np.ndarray,
    frame_index: int,
    ee_pose: Pose | None = None,
    truth: Pose | None = None,
) -> Pose:
    """Advance the tracker by one frame and return the new pose estimate.

    The crop prior is the last matched box while free, or the projected
    footprint of the kinematically predicted box while in hand.  Failures
    (template loss, empty mask, no registration overlap) hold the prior pose
    and widen the next search window instead of raising.  When ``truth`` is
    given the pose errors against it are recorded in the history.
    """
    depth = np.asarray(depth, dtype=float)
    config = state.config
    prior_pose = _predicted_pose(state, ee_pose)

    prior_bbox = state.bbox
    if state.mode == "in-hand":
        try:
            predicted = project_bbox(
                Cuboid(prior_pose, state.half_extents), state.camera)
            if predicted.width >= 2 and predicted.height >= 2:
                prior_bbox = predicted
        except BehindCameraError:
            pass

    # widen both the search window and the depth gate while reacquiring
    growth = 1.0 + min(state.lost_streak, 6)
    matcher = state.config.matcher
    if state.lost_streak > 0:
        matcher = replace(matcher, context_factor=matcher.context_factor * growth)
    cz = _camera_depth_of(prior_pose, state.camera)
    slack = float(np.linalg.norm(state.half_extents)) + config.depth_margin * growth
    track = match(intensity, state.template_module, prior_bbox, matcher,
                  frame_index, depth=depth, depth_interval=(cz - slack, cz + slack))

    recovering = state.lost_streak > 0
    if not recovering:
        if track.lost or track.mask is None:
            return _hold(state, prior_pose, prior_bbox, STATUS_LOST,
                         frame_index, track.score, truth)
        # a nearby surface entering the crop can pull the correlation peak
        # enough to clip the object; merging the matched box with the prior
        # footprint keeps the whole object under the depth gate
        rect = track.bbox
        try:
            proj = project_bbox(
                Cuboid(prior_pose, state.half_extents), state.camera)
            if proj.width >= 2 and proj.height >= 2:
                rect = rect.union(proj)
        except BehindCameraError:
            pass
        rows, cols = depth.shape
        mask = depth_interval_mask(depth, rect.clamped(cols, rows),
                                   cz - slack, cz + slack)
    else:
        # while reacquiring, the matcher peak cannot be trusted, so consider
        # every in-gate pixel of the whole grown window instead of just the
        # footprint of its best match
        rows, cols = depth.shape
        window = prior_bbox.scaled(matcher.context_factor).clamped(cols, rows)
        mask = depth_interval_mask(depth, window, cz - slack, cz + slack)
    mask = mask & np.isfinite(depth) & (depth > 0)
    if int(mask.sum()) < config.min_mask_pixels:
        return _hold(state, prior_pose, prior_bbox, STATUS_NO_OVERLAP,
                     frame_index, track.score, truth)
    observed = backproject(depth, mask, state.camera)
    keep = observed.points[:, 2] > config.height_threshold

    guess = prior_pose
    if not recovering:
        # prune pixels that leaked in from the arm or a nearby occluder
        keep &= Cuboid(prior_pose, state.half_extents).contains(
            observed.points, tol=config.containment_tol)
        kept = observed.points[keep]
    else:
        # reacquisition: the window may hold several surfaces, so lock onto
        # a connected blob whose spatial extent fits the object
        ee_pos = ee_pose.translation if ee_pose is not None else None
        kept = _reacquire_blob(depth, mask, keep, state, config, ee_pos,
                               window=window)
        if kept is None:
            return _hold(state, prior_pose, prior_bbox, STATUS_NO_OVERLAP,
                         frame_index, track.score, truth)
        shift = kept.mean(axis=0) - guess.apply(
            state.template_cloud.points.mean(axis=0)[None, :])[0]
        guess = Pose(guess.rotation, guess.translation + shift)
        # the surface means above disagree once the view direction changed,
        # so the seeded box can sit a couple of centimeters off the blob;
        # doubled slack keeps the whole blob available to the registration
        inside = Cuboid(guess, state.half_extents).contains(
            kept, tol=2.0 * config.containment_tol)
        kept = kept[inside]
    if len(kept) < config.min_mask_pixels:
        return _hold(state, prior_pose, prior_bbox, STATUS_NO_OVERLAP,
                     frame_index, track.score, truth)
    observed = _surface_model(kept, config.voxel_leaf, config.registration)

    try:
        result = register(state.registration_template, observed, guess,
                          config.registration)
    except (NoOverlapError, InsufficientPointsError, ValueError):
        return _hold(state, prior_pose, prior_bbox, STATUS_NO_OVERLAP,
                     frame_index, track.score, truth)
    if result.fitness < config.min_fitness:
        return _hold(state, prior_pose, prior_bbox, STATUS_NO_OVERLAP,
                     frame_index, track.score, truth)
    jump_allow = config.max_frame_jump
    if recovering:
        # the centroid seed is off by up to the surface-to-center offset
        jump_allow += float(np.linalg.norm(state.half_extents))
    if float(np.linalg.norm(result.transform.translation
                            - guess.translation)) > jump_allow:
        # a plausible-looking fit that far from the prior is another surface
        return _hold(state, prior_pose, prior_bbox, STATUS_NO_OVERLAP,
                     frame_index, track.score, truth)
    contained = Cuboid(result.transform, state.half_extents).contains(
        observed.points, tol=config.containment_tol)
    if float(contained.mean()) < config.min_contained:
        # the aligned box does not explain the observation; wrong surface
        return _hold(state, prior_pose, prior_bbox, STATUS_NO_OVERLAP,
                     frame_index, track.score, truth)

    state.current_pose = result.transform.orthonormalized()
    # anchor the next search window on the image footprint of the pose just
    # registered, so correlation error cannot accumulate in the window
    new_bbox = track.bbox
    try:
        projected = project_bbox(
            Cuboid(state.current_pose, state.half_extents), state.camera)
        if projected.width >= 2 and projected.height >= 2:
            new_bbox = projected
    except BehindCameraError:
        pass
    state.bbox = new_bbox
    state.last_status = STATUS_OK
    state.score = track.score
    state.lost_streak = 0
    state.frame_index = frame_index

    if not recovering and frame_index % config.stm_period == 0:
        candidate = Template.from_patch(_crop(intensity, track.bbox), frame_index)
        state.template_module.update_stm(candidate.patch, frame_index)
        state.template_module.try_admit_ltm(candidate)

    _record(state, frame_index, track.score, STATUS_OK, truth)
    return state.current_pose


def set_in_hand(state: TrackerState, ee_pose: Pose) -> None:
    """Switch the crop prior to forward kinematics, latching the current offset."""
    state.grasp_offset = ee_pose.inverse() @ state.current_pose
    state.mode = "in-hand"


def set_free(state: TrackerState) -> None:
    state.mode = "free"
    state.grasp_offset = None


def write_metrics_csv(state: TrackerState, path) -> None:
    """One row per tracked frame: frame_index, t_err_m, r_err_rad, score, status."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "t_err_m", "r_err_rad", "score", "status"])
        for row in state.history:
            writer.writerow([row.frame_index, f"{row.t_err:.6f}", f"{row.r_err:.6f}",
                             f"{row.score:.4f}", row.status])


class LatestWinsMailbox:
    """Single-slot handoff between a producer and one slow consumer.

    ``put`` overwrites any unconsumed item, so the consumer always sees the
    newest frame and stale ones are dropped rather than queued.  ``get``
    blocks until an item or :meth:`close` arrives and returns ``None`` once
    the mailbox is closed and drained.
    """

    def __init__(self):
        import threading

        self._cond = threading.Condition()
        self._item = None
        self._has_item = False
        self._closed = False
        self.dropped = 0

    def put(self, item) -> None:
        with self._cond:
            if self._has_item:
                self.dropped += 1
            self._item = item
            self._has_item = True
            self._cond.notify()

    def get(self, timeout: float | None = None):
        with self._cond:
            if not self._cond.wait_for(lambda: self._has_item or self._closed, timeout):
                raise TimeoutError("mailbox empty")
            if not self._has_item:
                return None
            item = self._item
            self._item = None
            self._has_item = False
            return item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
