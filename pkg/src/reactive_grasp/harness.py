"""Deterministic simulation loop: events, camera, tracker, observer, planner.

One call to :func:`run_scenario` plays a scripted scenario tick by tick at a
fixed simulated 50 Hz.  The harness owns the ground-truth scene and is its
single writer: scripted events mutate it, the planner's commanded joint
vector is applied once per tick, and the attached object is re-synced after
every configuration change.  The camera fires every second tick; the tracker
consumes each frame and its pose estimate feeds a planning-side view of the
scene in which the target cuboid is the *tracked* one, so the observer and
the planner never peek at ground truth.  Ground truth is used only where
the real world would push back: validating gripper closure, rendering, and
the recorded error metrics.

Runs are deterministic: identical scenario and seed produce byte-identical
CSV output.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import observer as obs
from . import tracking
from .geometry import Cuboid, Pose, geodesic_error, so3_exp, so3_log
from .planner import PlannerState, advance
from .render import FrameBundle, RenderConfig, render
from .robot import default_robot
from .scene import SceneState, pairwise_distances
from .scenario import Scenario

__all__ = ["RunResult", "HarnessError", "run_scenario", "SimLoop"]

TICK_RATE = 50          # simulated ticks per second
CAMERA_PERIOD = 2       # camera (and tracker/observer) fire every second tick
PLANNER_MARGIN = 0.01   # planning-side clearance buffer absorbing tracking error


class HarnessError(RuntimeError):
    """An invariant violation inside the loop, tagged with tick and module."""


@dataclass
class RunResult:
    name: str
    mode: str
    success: bool
    outcome: str
    ticks: int
    summary: dict = field(default_factory=dict)
    tracking_csv: str | None = None
    trajectory_csv: str | None = None


def _lerp_pose(a: Pose, b: Pose, s: float) -> Pose:
    w = so3_log(a.rotation.T @ b.rotation)
    return Pose(a.rotation @ so3_exp(s * w),
                (1.0 - s) * a.translation + s * b.translation)


@dataclass
class _Motion:
    kind: str             # "object" or "robot"
    index: int
    start_tick: int
    end_tick: int
    pose_from: Pose | None = None
    pose_to: Pose | None = None
    q_from: np.ndarray | None = None
    q_to: np.ndarray | None = None

    def fraction(self, tick: int) -> float:
        if self.end_tick <= self.start_tick:
            return 1.0
        return min(max((tick - self.start_tick) / (self.end_tick - self.start_tick), 0.0), 1.0)


class SimLoop:
    """Owns the ground-truth scene and advances it one tick at a time.

    Split out of :func:`run_scenario` so the live server can drive the same
    loop in real time and inject commands between ticks.
    """

    def __init__(self, scenario: Scenario, seed: int | None = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        robot = default_robot()
        q0 = np.asarray(scenario.q0 if scenario.q0 is not None else robot.home,
                        dtype=float)
        if not robot.within_limits(q0):
            raise HarnessError("tick 0, scenario: q0 violates joint limits")
        self.camera = scenario.camera.build()
        self.topdown = scenario.topdown.build()
        self.scene = SceneState(robot, q0.copy(), scenario.build_objects(),
                                scenario.target, camera=self.camera)
        self.render_config = RenderConfig(seed=self.seed)
        self.tick = 0
        self.events = list(scenario.events)
        self.motions: list[_Motion] = []
        self.paused_until = -1
        self.tracking_paused_until = -1
        self.teleports_applied = 0
        self.teleports_rejected = 0

        self.tracker: tracking.TrackerState | None = None
        self.detection: tracking.Detection | None = None
        self.truth_at_init: Pose | None = None
        self.tracked_target: Cuboid | None = None

        self.planner: PlannerState | None = None
        self.pool = None
        self.observer_config = None
        self.ranked = None
        if scenario.mode == "grasp":
            self.planner = PlannerState(q_t=q0.copy(), q_0=q0.copy(),
                                        collision_margin=PLANNER_MARGIN)
            self.observer_config = obs.ObserverConfig(seed=self.seed)
            self.pool = obs.make_pool(self.scene, self.observer_config)

        self.frame: FrameBundle | None = None
        self.stage_times: dict = {"render": 0.0, "tracker": 0.0,
                                  "observer": 0.0, "planner": 0.0}
        self.frames = 0

    # -- initialization ----------------------------------------------------

    def detect_and_init_tracker(self) -> None:
        """Top-down detection pass, then tracker init from the side camera."""
        empty = SceneState(self.scene.robot, self.scene.q.copy(), [],
                           camera=self.topdown)
        background = render(empty, self.topdown, tick=0, config=self.render_config)
        first = render(self.scene, self.topdown, tick=0, config=self.render_config)
        detections = tracking.detect_objects(first.depth, background.depth,
                                             self.topdown)
        if not detections:
            raise HarnessError("tick 0, tracking: no objects detected")
        want = self.scene.target.pose.translation
        det = min(detections,
                  key=lambda d: float(np.linalg.norm(d.cuboid.pose.translation - want)))
        offset = float(np.linalg.norm(det.cuboid.pose.translation - want))
        if offset > 0.06:
            raise HarnessError(
                f"tick 0, tracking: nearest detection {offset:.3f} m from target")
        from .geometry import project_bbox
        side_bbox = project_bbox(det.cuboid, self.camera)
        side = render(self.scene, self.camera, tick=0, config=self.render_config)
        self.detection = tracking.Detection(det.cuboid, side_bbox, det.pixel_count)
        self.tracker = tracking.initialize(side.intensity, side.depth,
                                           self.detection, self.camera)
        self.truth_at_init = self.scene.target.pose
        self.tracked_target = self.detection.cuboid
        self.frame = side

    # -- event machinery ---------------------------------------------------

    def _apply_event(self, e) -> None:
        scene = self.scene
        if e.kind in ("move_object", "occlude"):
            target_pose = e.target_pose(scene.objects[e.object].pose)
            if e.duration <= 0:
                self._set_object_pose(e.object, target_pose)
            else:
                self.motions.append(_Motion("object", e.object, e.tick,
                                            e.tick + e.duration,
                                            pose_from=scene.objects[e.object].pose,
                                            pose_to=target_pose))
        elif e.kind == "teleport_object":
            pose = e.target_pose(scene.objects[e.object].pose)
            if self._destination_collides(e.object, pose):
                self.teleports_rejected += 1
                return
            if scene.attached is not None and scene.attached[0] == e.object:
                scene.release()
                if self.tracker is not None:
                    tracking.set_free(self.tracker)
            self._set_object_pose(e.object, pose)
            self.teleports_applied += 1
        elif e.kind == "perturb_robot":
            dq = np.asarray(e.dq, dtype=float)
            lim = scene.robot.limits
            scene.q = np.clip(scene.q + dq, lim[:, 0], lim[:, 1])
            scene.sync_attached()
            if self.planner is not None:
                self.planner.q_t = scene.q.copy()
        elif e.kind == "move_robot":
            q_to = np.asarray(e.q, dtype=float)
            if not scene.robot.within_limits(q_to):
                raise HarnessError(
                    f"tick {e.tick}, scenario: move_robot target violates limits")
            self.motions.append(_Motion("robot", -1, e.tick, e.tick + e.duration,
                                        q_from=scene.q.copy(), q_to=q_to))
        elif e.kind == "attach_object":
            fk = scene.robot.fk(scene.q)
            scene.attach(e.object, fk.ee_pose.inverse() @ scene.objects[e.object].pose)
            if self.tracker is not None:
                tracking.set_in_hand(self.tracker, fk.ee_pose)
        elif e.kind == "release_object":
            scene.release()
            if self.tracker is not None:
                tracking.set_free(self.tracker)
        elif e.kind == "pause_tracking":
            self.tracking_paused_until = e.tick + max(e.duration, 1)

    def _set_object_pose(self, index: int, pose: Pose) -> None:
        self.scene.objects[index] = Cuboid(pose, self.scene.objects[index].half_extents)

    def _destination_collides(self, index: int, pose: Pose) -> bool:
        """Reject teleports that would embed the object in the arm."""
        box = Cuboid(pose, self.scene.objects[index].half_extents)
        probe = SceneState(self.scene.robot, self.scene.q, [box], 0)
        report = pairwise_distances(probe, self.scene.q, cull_above=0.02)
        return bool(report.distances.size and report.distances.min() < 0.0)

    # -- live commands -------------------------------------------------------

    def apply_command(self, kind: str, payload: dict) -> str | None:
        """Apply a live user command; returns an error string on rejection.

        Mirrors the scripted-event semantics (teleport collision checks,
        rip-out release of an attached object, joint-limit clamping) so a
        human poking at the scene cannot reach states a scenario could not.
        Deltas are clamped to 0.5 m translation and pi/2 rotation.  Must be
        called from whatever thread owns the loop, between ticks.
        """
        scene = self.scene
        if kind in ("move_object", "rotate_object"):
            index = payload.get("object", self.scenario.target)
            if not isinstance(index, int) or not 0 <= index < len(scene.objects):
                return f"no object {index!r}"
            pose = scene.objects[index].pose
            if kind == "move_object":
                delta = np.asarray(payload.get("delta", ()), dtype=float).ravel()
                if delta.shape != (3,) or not np.all(np.isfinite(delta)):
                    return "move_object needs a finite 3-vector delta"
                norm = float(np.linalg.norm(delta))
                if norm > 0.5:
                    delta *= 0.5 / norm
                pose = Pose(pose.rotation, pose.translation + delta)
            else:
                dyaw = payload.get("dyaw", 0.0)
                if not isinstance(dyaw, (int, float)) or not np.isfinite(dyaw):
                    return "rotate_object needs a finite dyaw"
                dyaw = float(np.clip(dyaw, -np.pi / 2, np.pi / 2))
                spin = so3_exp(np.array([0.0, 0.0, dyaw]))
                pose = Pose(spin @ pose.rotation, pose.translation)
            if self._destination_collides(index, pose):
                self.teleports_rejected += 1
                return "destination overlaps the arm"
            if scene.attached is not None and scene.attached[0] == index:
                scene.release()
                if self.tracker is not None:
                    tracking.set_free(self.tracker)
            self._set_object_pose(index, pose)
            self.teleports_applied += 1
            return None
        if kind == "nudge_joint":
            joint = payload.get("joint")
            delta = payload.get("delta", 0.0)
            if not isinstance(joint, int) or not 0 <= joint < scene.robot.n_joints:
                return f"no joint {joint!r}"
            if not isinstance(delta, (int, float)) or not np.isfinite(delta):
                return "nudge_joint needs a finite delta"
            dq = np.zeros(scene.robot.n_joints)
            dq[joint] = float(np.clip(delta, -np.pi / 2, np.pi / 2))
            lim = scene.robot.limits
            scene.q = np.clip(scene.q + dq, lim[:, 0], lim[:, 1])
            scene.sync_attached()
            if self.planner is not None:
                self.planner.q_t = scene.q.copy()
            return None
        return f"unknown command kind {kind!r}"

    def _run_events(self) -> None:
        while self.events and self.events[0].tick <= self.tick:
            self._apply_event(self.events.pop(0))
        still = []
        for m in self.motions:
            s = m.fraction(self.tick)
            if m.kind == "object":
                self._set_object_pose(m.index, _lerp_pose(m.pose_from, m.pose_to, s))
            else:
                self.scene.q = m.q_from + s * (m.q_to - m.q_from)
                self.scene.sync_attached()
                if self.planner is not None:
                    self.planner.q_t = self.scene.q.copy()
            if self.tick < m.end_tick:
                still.append(m)
        self.motions = still

    # -- per-tick stages ---------------------------------------------------

    def _planning_view(self) -> SceneState:
        objects = list(self.scene.objects)
        objects[self.scenario.target] = self.tracked_target
        return SceneState(self.scene.robot, self.scene.q, objects,
                          self.scenario.target, attached=self.scene.attached)

    def _camera_tick(self) -> None:
        t0 = time.perf_counter()
        self.frame = render(self.scene, self.camera, tick=self.tick,
                            config=self.render_config)
        self.stage_times["render"] += time.perf_counter() - t0
        if self.tracker is None or self.tick < self.tracking_paused_until:
            return
        truth = (self.scene.target.pose @ self.truth_at_init.inverse()
                 @ self.detection.cuboid.pose)
        # the hand pose drives the in-hand prior and masks the gripper out
        # of reacquisition, so it is passed in both modes
        ee_pose = self.scene.robot.fk(self.scene.q).ee_pose
        t0 = time.perf_counter()
        try:
            tracking.step(self.tracker, self.frame.intensity, self.frame.depth,
                          self.tick, ee_pose=ee_pose, truth=truth)
        except Exception as exc:
            raise HarnessError(f"tick {self.tick}, tracking: {exc}") from exc
        self.stage_times["tracker"] += time.perf_counter() - t0
        self.frames += 1
        self.tracked_target = Cuboid(self.tracker.current_pose,
                                     self.detection.cuboid.half_extents)

    def _observer_tick(self) -> None:
        view = self._planning_view()
        t0 = time.perf_counter()
        try:
            obs.tick(self.pool, view, self.tracked_target, self.observer_config)
            self.ranked = obs.rank(self.pool, view, self.tracked_target,
                                   self.observer_config)
        except Exception as exc:
            raise HarnessError(f"tick {self.tick}, observer: {exc}") from exc
        self.stage_times["observer"] += time.perf_counter() - t0

    def _planner_tick(self) -> None:
        was_attached = self.scene.attached is not None
        scene = (self.scene if self.planner.phase in ("grasp", "lift")
                 else self._planning_view())
        t0 = time.perf_counter()
        try:
            advance(self.planner, scene, self.ranked)
        except AssertionError as exc:
            raise HarnessError(f"tick {self.tick}, planner: {exc}") from exc
        self.stage_times["planner"] += time.perf_counter() - t0
        self.scene.q = self.planner.q_t.copy()
        self.scene.sync_attached()
        if not was_attached and self.scene.attached is not None:
            tracking.set_in_hand(self.tracker,
                                 self.scene.robot.fk(self.scene.q).ee_pose)
        elif was_attached and self.scene.attached is None:
            tracking.set_free(self.tracker)

    def step(self) -> None:
        """Advance simulated time by one tick."""
        self.tick += 1
        self.scene.tick = self.tick
        self._run_events()
        if self.tick % CAMERA_PERIOD == 0:
            self._camera_tick()
            if self.pool is not None:
                self._observer_tick()
        if self.planner is not None:
            self._planner_tick()

    def true_min_distance(self) -> float:
        report = pairwise_distances(self.scene, self.scene.q, cull_above=0.05)
        return float(report.distances.min()) if report.distances.size else float("inf")

    @property
    def done(self) -> bool:
        return self.planner is not None and self.planner.phase == "done"


def run_scenario(scenario: Scenario, out_dir=None, seed: int | None = None) -> RunResult:
    """Play a scenario to completion and collect metrics.

    Writes ``tracking.csv`` (per camera frame) and ``trajectory.csv`` (per
    tick) into ``out_dir`` when given.  Grasp scenarios end early once the
    object is lifted; the result's ``success`` reflects the scenario goal.
    """
    loop = SimLoop(scenario, seed)
    loop.detect_and_init_tracker()

    traj = io.StringIO()
    writer = csv.writer(traj)
    n = loop.scene.robot.n_joints
    writer.writerow(["tick", "phase"] + [f"q{i}" for i in range(n)]
                    + ["s", "backstep", "min_distance"])

    min_true = float("inf")
    backsteps = 0
    for _ in range(scenario.duration):
        loop.step()
        d = loop.true_min_distance()
        min_true = min(min_true, d)
        if loop.planner is not None:
            phase = loop.planner.phase
            s = loop.planner.s
            back = int(loop.planner.last_backstep)
            backsteps += back
        else:
            phase, s, back = "scripted" if loop.motions else "idle", 0.0, 0
        writer.writerow([loop.tick, phase]
                        + [f"{v:.9g}" for v in loop.scene.q]
                        + [f"{s:.9g}", back, f"{d:.9g}"])
        if loop.done:
            break

    tracker = loop.tracker
    rows = list(tracker.history)
    errs_t = np.array([r.t_err for r in rows[1:]]) if len(rows) > 1 else np.zeros(1)
    errs_r = np.array([r.r_err for r in rows[1:]]) if len(rows) > 1 else np.zeros(1)
    lost = sum(1 for r in rows if r.status != tracking.STATUS_OK)
    summary = {
        "ticks": loop.tick,
        "frames": loop.frames,
        "lost_frames": int(lost),
        "max_t_err": float(np.nanmax(errs_t)) if errs_t.size else 0.0,
        "max_r_err": float(np.nanmax(errs_r)) if errs_r.size else 0.0,
        "final_t_err": float(rows[-1].t_err) if rows else 0.0,
        "final_r_err": float(rows[-1].r_err) if rows else 0.0,
        "min_distance": min_true,
        "teleports": loop.teleports_applied,
        "teleports_rejected": loop.teleports_rejected,
        "stage_seconds": dict(loop.stage_times),
    }
    if loop.planner is not None:
        summary["backsteps"] = backsteps
        summary["phase"] = loop.planner.phase
        summary["attached"] = loop.scene.attached is not None
        success = loop.done
        outcome = "grasped" if success else f"incomplete ({loop.planner.phase})"
    else:
        success = True
        outcome = "completed"

    tracking_csv = trajectory_csv = None
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        tracking_csv = os.path.join(out_dir, "tracking.csv")
        trajectory_csv = os.path.join(out_dir, "trajectory.csv")
        tracking.write_metrics_csv(tracker, tracking_csv)
        with open(trajectory_csv, "w", newline="") as f:
            f.write(traj.getvalue())

    return RunResult(scenario.name, scenario.mode, success, outcome, loop.tick,
                     summary, tracking_csv, trajectory_csv)
