"""Scene container and the differentiable task maps built on it.

``SceneState`` is the single source of truth for the simulation: robot
configuration, object cuboids, which object is the grasp target, an
optional rigid attachment of the target to the gripper, and the tracking
camera.  The simulator is the only writer; everyone else works on
snapshots.

``task_maps`` evaluates the grasp cost maps (position, alignment,
collision hinge, joint-limit hinge, homing, random-basis alignment) with
analytic Jacobians, all as functions of the joint vector.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .collision import (
    segment_box_distance_batch,
    segment_box_lower_bound,
    segment_plane_distance,
)
from .geometry import CameraModel, Cuboid, Pose
from .robot import FkResult, RobotModel

__all__ = [
    "SceneState",
    "DistanceReport",
    "TaskMapParams",
    "pairwise_distances",
    "task_maps",
]


@dataclass
class SceneState:
    robot: RobotModel
    q: np.ndarray
    objects: list
    target_index: int = 0
    attached: tuple | None = None   # (object index, grasp offset: ee -> object)
    camera: CameraModel | None = None
    tick: int = 0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)

    @property
    def target(self) -> Cuboid:
        return self.objects[self.target_index]

    def snapshot(self) -> "SceneState":
        return SceneState(
            self.robot,
            self.q.copy(),
            list(self.objects),
            self.target_index,
            self.attached,
            self.camera,
            self.tick,
        )

    def attach(self, index: int, grasp_offset: Pose) -> None:
        self.attached = (index, grasp_offset)

    def release(self) -> None:
        self.attached = None

    def sync_attached(self, fk: FkResult | None = None) -> None:
        """Keep the attached object rigidly on the gripper (call after q changes)."""
        if self.attached is None:
            return
        idx, offset = self.attached
        fk = fk or self.robot.fk(self.q)
        pose = fk.ee_pose @ offset
        self.objects[idx] = Cuboid(pose, self.objects[idx].half_extents)


@dataclass
class DistanceReport:
    """Pairwise capsule/obstacle distances with what is needed for gradients."""

    distances: np.ndarray    # (P,) signed, capsule radius already subtracted
    points: np.ndarray       # (P, 3) capsule-axis point attaining the distance
    normals: np.ndarray      # (P, 3) world gradient of the distance wrt the point
    links: np.ndarray        # (P,) link index of the capsule
    labels: list             # (P,) human-readable pair names


def pairwise_distances(
    scene: SceneState,
    q: np.ndarray,
    target: Cuboid | None = None,
    fk: FkResult | None = None,
    cull_above: float | None = None,
) -> DistanceReport:
    """Signed distances of every robot capsule to every obstacle.

    Obstacles are the target cuboid (the ``target`` argument when given,
    e.g. the tracked estimate, otherwise the scene's target object), the
    remaining cuboids, and the table plane.  An attached object is no
    obstacle, capsules flagged as base geometry skip the table, and the
    jaw-sweep capsule skips the one target it is allowed to straddle.

    With ``cull_above`` set, pairs whose cheap lower bound is already at
    or above that value skip the exact minimization and report the bound
    instead (with a zero normal).  Any reported distance below the cutoff
    is always exact, so hinge activations and minima below it are
    unaffected.
    """
    robot = scene.robot
    fk = fk or robot.fk(q)
    p0, p1 = robot.capsule_endpoints(fk)
    radii = np.array([c.radius for c in robot.capsules])
    attached_idx = scene.attached[0] if scene.attached is not None else None

    boxes: list[tuple[str, Cuboid]] = []
    if target is not None or scene.objects:
        tgt = target if target is not None else scene.objects[scene.target_index]
        if attached_idx != scene.target_index:
            boxes.append(("target", tgt))
    for i, cub in enumerate(scene.objects):
        if i == scene.target_index or i == attached_idx:
            continue
        boxes.append((f"object{i}", cub))

    seg_idx: list[int] = []
    box_list: list[Cuboid] = []
    labels: list[str] = []
    for k, cap in enumerate(robot.capsules):
        for name, cub in boxes:
            if cap.grasp_volume and name == "target":
                continue   # the jaw sweep is allowed to straddle the target
            seg_idx.append(k)
            box_list.append(cub)
            labels.append(f"cap{k}-{name}")

    rows_d, rows_p, rows_n, rows_l = [], [], [], []
    if box_list:
        si = np.asarray(seg_idx)
        P0, P1 = p0[si], p1[si]
        centers = np.stack([c.pose.translation for c in box_list])
        rots = np.stack([c.pose.rotation for c in box_list])
        halves = np.stack([c.half_extents for c in box_list])
        rad = radii[si]

        dist = np.empty(len(si))
        pts_out = 0.5 * (P0 + P1)
        grads_out = np.zeros((len(si), 3))
        if cull_above is not None:
            bound = segment_box_lower_bound(P0, P1, centers, halves) - rad
            keep = bound < cull_above
            dist[~keep] = bound[~keep]
        else:
            keep = np.ones(len(si), dtype=bool)
        if keep.any():
            sdf, _, pts, grads = segment_box_distance_batch(
                P0[keep], P1[keep], centers[keep], rots[keep], halves[keep])
            dist[keep] = sdf - rad[keep]
            pts_out[keep] = pts
            grads_out[keep] = grads

        rows_d.append(dist)
        rows_p.append(pts_out)
        rows_n.append(grads_out)
        rows_l.append(np.array([robot.capsules[k].link for k in si]))

    table_labels = []
    td, tp, tn, tl = [], [], [], []
    for k, cap in enumerate(robot.capsules):
        if not cap.collides_table:
            continue
        d, pt, n = segment_plane_distance(p0[k], p1[k])
        td.append(d - radii[k])
        tp.append(pt)
        tn.append(n)
        tl.append(cap.link)
        table_labels.append(f"cap{k}-table")
    if td:
        rows_d.append(np.array(td))
        rows_p.append(np.stack(tp))
        rows_n.append(np.stack(tn))
        rows_l.append(np.array(tl))
        labels.extend(table_labels)

    if not rows_d:
        return DistanceReport(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)),
                              np.zeros(0, dtype=int), [])
    return DistanceReport(
        np.concatenate(rows_d),
        np.concatenate(rows_p),
        np.concatenate(rows_n),
        np.concatenate(rows_l).astype(int),
        labels,
    )


@dataclass(frozen=True)
class TaskMapParams:
    q_home: np.ndarray | None = None
    collision_margin: float = 0.03
    limit_margin: float = np.deg2rad(5.0)


def task_maps(
    scene: SceneState,
    q: np.ndarray,
    target: Cuboid,
    basis: np.ndarray | None = None,
    params: TaskMapParams | None = None,
    with_jacobians: bool = True,
) -> dict:
    """Values and analytic Jacobians of all grasp cost maps at ``q``.

    Returns a dict mapping name -> (value, jacobian) with shapes:
    pos (3,), align (1,), coll (P,), limit (n,), home (n,), and, when a
    random basis is supplied, rand (3,).  The object pose is treated as
    constant in q (the free-object case).  ``with_jacobians=False`` skips
    the derivative work and returns (value, None) pairs; solvers use it
    for trial-step evaluations.
    """
    params = params or TaskMapParams()
    robot = scene.robot
    n = robot.n_joints
    fk = robot.fk(q)
    Jw = None
    if with_jacobians:
        Jp, Jw = robot.ee_jacobian(fk)
    out: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}

    # position: object center minus end-effector position
    p_e = fk.ee_pose.translation
    out["pos"] = (target.pose.translation - p_e, -Jp if with_jacobians else None)

    # alignment: product of (1 - (object axis . ee x-axis)^2) over the three object axes
    v_ex = fk.ee_pose.rotation[:, 0]
    axes = target.pose.rotation.T            # rows are the object axes
    dots = axes @ v_ex
    factors = 1.0 - dots**2
    value = float(np.prod(factors))
    if with_jacobians:
        dv_ex = np.cross(Jw.T, v_ex).T      # (3, n): d v_ex / d q_i = z_i x v_ex
        jac = np.zeros((1, n))
        for k in range(3):
            others = np.prod(np.delete(factors, k))
            jac[0] += -2.0 * dots[k] * others * (axes[k] @ dv_ex)
        out["align"] = (np.array([value]), jac)
    else:
        out["align"] = (np.array([value]), None)

    # collision: hinge on pairwise distances below the margin; exact
    # distances are only needed below the margin, so far pairs are culled
    report = pairwise_distances(scene, q, target, fk=fk,
                                cull_above=params.collision_margin)
    active = report.distances < params.collision_margin
    coll_val = np.where(active, report.distances - params.collision_margin, 0.0)
    if with_jacobians:
        coll_jac = np.zeros((len(coll_val), n))
        for p in np.nonzero(active)[0]:
            Jpt = robot.point_jacobian(fk, report.points[p], int(report.links[p]))
            coll_jac[p] = report.normals[p] @ Jpt
        out["coll"] = (coll_val, coll_jac)
    else:
        out["coll"] = (coll_val, None)

    # joint limits: two-sided hinge with a soft margin inside the limits
    lim = robot.limits
    lo = lim[:, 0] + params.limit_margin
    hi = lim[:, 1] - params.limit_margin
    limit_val = np.where(q > hi, q - hi, np.where(q < lo, q - lo, 0.0))
    limit_jac = np.diag(((q > hi) | (q < lo)).astype(float)) if with_jacobians else None
    out["limit"] = (limit_val, limit_jac)

    # homing
    q_home = params.q_home if params.q_home is not None else robot.home
    out["home"] = (q - q_home, np.eye(n) if with_jacobians else None)

    # random-basis alignment: component k is 1 - (basis_k . ee axis_k)^2
    if basis is not None:
        val = np.empty(3)
        jac_r = np.empty((3, n)) if with_jacobians else None
        for k in range(3):
            v_k = basis[:, k]
            e_k = fk.ee_pose.rotation[:, k]
            d = float(v_k @ e_k)
            val[k] = 1.0 - d * d
            if with_jacobians:
                de_k = np.cross(Jw.T, e_k).T
                jac_r[k] = -2.0 * d * (v_k @ de_k)
        out["rand"] = (val, jac_r)

    return out
