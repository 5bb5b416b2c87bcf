"""Backstepping trajectory follower.

The follower tracks the straight joint-space line from the homing
configuration q_0 to the best grasp configuration q*.  Each tick it
projects the current configuration onto that line and tries to step
toward the projection's tau-advanced point; when the swept segment is
blocked it retreats toward q_0 in committed bursts, doubling the burst
after every retry that finds the way forward still blocked, so obstacles
that need a deep retreat get one instead of a thrashing boundary dance.
q* is re-read from the observer every tick, so the target line follows
the object.

A grasp whose forward retries keep failing, or that is reached without
ever firing the grasp trigger, is set aside for a cooldown and the
follower adopts the observer's next-best candidate, so a wall between
the arm and one approach direction cannot pin the whole system.

Phases: approach -> (backstep <-> approach) -> grasp -> lift -> done.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Cuboid, Pose
from .observer import GraspCandidate, RankedPool
from .scene import SceneState, pairwise_distances

__all__ = [
    "PlannerState",
    "closest_on_trajectory",
    "config_collides",
    "swept_collides",
    "plan_step",
    "grasp_and_lift",
    "advance",
]


@dataclass
class PlannerState:
    q_t: np.ndarray
    q_0: np.ndarray
    q_star: np.ndarray | None = None
    tau: float = 0.05                 # joint-space L2 stepsize
    phase: str = "approach"           # approach | backstep | grasp | lift | done
    collision_margin: float = 0.0     # clearance required of published steps
    stuck: bool = False
    s: float = 0.0                    # trajectory parameter of the last projection
    backstep_count: int = 0
    last_backstep: bool = False
    min_distance: float = np.inf      # of the last published configuration
    q_star_index: int = -1            # candidate index behind q_star
    q_star_distance: float = np.inf   # its shape-normalized distance, for hysteresis
    ticks: int = 0
    backstep_commit: int = 0          # retreat steps still owed before retrying forward
    commit_next: int = 5              # size of the next retreat commitment
    commit_base: int = 5
    commit_cap: int = 40
    retry_failures: int = 0           # blocking events at the same wall
    retry_limit: int = 3
    block_s: float = -1.0             # trajectory parameter of the last wall
    hold_ticks: int = 0               # ticks parked at q_star without a grasp trigger
    hold_limit: int = 10
    stuck_ticks: int = 0              # consecutive ticks with both directions blocked
    stuck_limit: int = 10
    grasp_failures: int = 0           # closure validations failed at this q_star
    grasp_failure_limit: int = 5
    blocked: list = field(default_factory=list)   # (q_star, expiry tick) pairs
    blocked_cooldown: int = 200
    blocked_radius: float = 0.3       # joint-space radius a blocked grasp shadows
    lift_height: float = 0.15
    lift_step: float = 0.004          # end-effector meters per tick while lifting
    lift_anchor: Pose | None = None   # end-effector pose at closure
    lifted: float = 0.0

    def __post_init__(self):
        self.q_t = np.asarray(self.q_t, dtype=float)
        self.q_0 = np.asarray(self.q_0, dtype=float)
        if self.q_star is not None:
            self.q_star = np.asarray(self.q_star, dtype=float)
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


def closest_on_trajectory(q_t: np.ndarray, q_0: np.ndarray,
                          q_star: np.ndarray) -> tuple[np.ndarray, float]:
    """Orthogonal projection of q_t onto the segment [q_0, q_star].

    Returns (q_s, s) with s in [0, 1]; a degenerate segment gives (q_0, 0).
    """
    d = q_star - q_0
    denom = float(d @ d)
    if denom == 0.0:
        return q_0.copy(), 0.0
    s = float(np.clip((q_t - q_0) @ d / denom, 0.0, 1.0))
    return q_0 + s * d, s


def config_collides(scene: SceneState, q: np.ndarray, margin: float = 0.0) -> bool:
    """True when any pairwise distance at q falls below the margin."""
    report = pairwise_distances(scene, q, cull_above=margin + 0.01)
    return bool(report.distances.size and report.distances.min() < margin)


def swept_collides(scene: SceneState, q_a: np.ndarray, q_b: np.ndarray,
                   margin: float, resolution: float) -> bool:
    """Collision test of the straight joint segment q_a -> q_b.

    Samples every ``resolution`` radians of joint-space length, endpoint
    included, start excluded (the robot already stands there).
    """
    length = float(np.linalg.norm(q_b - q_a))
    n = max(int(np.ceil(length / resolution)), 1)
    for k in range(1, n + 1):
        q = q_a + (k / n) * (q_b - q_a)
        if config_collides(scene, q, margin):
            return True
    return False


def _ee_inside(scene: SceneState, q: np.ndarray, target: Cuboid) -> bool:
    p = scene.robot.fk(q).ee_pose.translation
    p_local = target.pose.inverse().apply(p)
    return bool(np.all(np.abs(p_local) <= target.half_extents))


def _normalized_distance(scene: SceneState, q: np.ndarray, target: Cuboid) -> float:
    p = scene.robot.fk(q).ee_pose.translation
    p_local = target.pose.inverse().apply(p)
    return float(np.linalg.norm(p_local / target.half_extents))


def _is_blocked(state: PlannerState, q: np.ndarray) -> bool:
    return any(float(np.linalg.norm(q - qb)) < state.blocked_radius
               for qb, _ in state.blocked)


def _ranked_best(state: PlannerState, ranked: RankedPool | None) -> GraspCandidate | None:
    """Best inside-and-feasible candidate that is not currently set aside."""
    if ranked is None:
        return None
    for e in ranked.entries:
        if e.inside and e.feasible and not _is_blocked(state, e.candidate.q):
            return e.candidate
    return None


def _update_q_star(state: PlannerState, scene: SceneState,
                   ranked: RankedPool | None) -> None:
    """Adopt the observer's best grasp, with 10% switching hysteresis.

    Refinements of the currently followed candidate are taken as-is; a
    different candidate must beat the current one's live distance by 10%
    to avoid limit cycles between near-equal grasps.
    """
    best = _ranked_best(state, ranked)
    if best is None:
        return
    target = scene.target
    if state.q_star is None or best.index == state.q_star_index:
        if state.q_star is None:
            _reset_progress(state)
        state.q_star = best.q.copy()
        state.q_star_index = best.index
        state.q_star_distance = _normalized_distance(scene, state.q_star, target)
        return
    d_cur = _normalized_distance(scene, state.q_star, target)
    d_new = _normalized_distance(scene, best.q, target)
    if d_new < 0.9 * d_cur:
        state.q_star = best.q.copy()
        state.q_star_index = best.index
        state.q_star_distance = d_new
        _reset_progress(state)
    else:
        state.q_star_distance = d_cur


def _reset_progress(state: PlannerState) -> None:
    state.backstep_commit = 0
    state.commit_next = state.commit_base
    state.retry_failures = 0
    state.hold_ticks = 0
    state.stuck_ticks = 0
    state.grasp_failures = 0
    state.block_s = -1.0


def _set_aside(state: PlannerState) -> None:
    """Shelve the current grasp for a cooldown and retarget."""
    state.blocked.append((state.q_star.copy(),
                          state.ticks + state.blocked_cooldown))
    state.q_star = None
    state.q_star_index = -1
    state.q_star_distance = np.inf
    _reset_progress(state)


def _publish(state: PlannerState, scene: SceneState, q: np.ndarray) -> np.ndarray:
    report = pairwise_distances(scene, q, cull_above=0.05)
    dmin = float(report.distances.min()) if report.distances.size else np.inf
    assert dmin >= 0.0, f"planner published a colliding configuration (d={dmin:.4f})"
    state.q_t = q
    state.min_distance = dmin
    state.stuck_ticks = 0
    return q


def plan_step(state: PlannerState, scene: SceneState,
              ranked: RankedPool | None) -> np.ndarray:
    """One approach/backstep tick; returns (and stores) the next q_t.

    The forward move aims at the projection's tau-advanced point, so the
    robot simultaneously re-joins and follows the target line; the swept
    segment is sampled at tau/10.  A blocked forward step opens a retreat
    commitment: the robot steps toward q_0 for ``commit_next`` ticks before
    retrying, and each retry that finds the way still blocked doubles the
    next commitment.  Retreating converges onto the trajectory's own start,
    so a deep enough retreat always re-enters the line; a retry budget is
    accounted by the caller through ``retry_failures``.
    """
    state.last_backstep = False
    state.stuck = False
    _update_q_star(state, scene, ranked)
    if state.q_star is None:
        return state.q_t
    tau = state.tau
    res = tau / 10.0
    q_t, q_0, q_star = state.q_t, state.q_0, state.q_star

    q_s, s = closest_on_trajectory(q_t, q_0, q_star)
    state.s = s

    to_star = q_star - q_s
    dist_star = float(np.linalg.norm(to_star))
    ahead = q_s + (min(tau, dist_star) / dist_star) * to_star if dist_star > 0 else q_star
    d = ahead - q_t
    dn = float(np.linalg.norm(d))
    if dn <= 1e-12:
        state.phase = "approach"
        state.hold_ticks += 1
        return state.q_t
    state.hold_ticks = 0
    q_next = ahead if dn <= tau else q_t + (tau / dn) * d

    if state.phase != "backstep" or state.backstep_commit <= 0:
        if not swept_collides(scene, q_t, q_next, state.collision_margin, res):
            state.phase = "approach"
            if s > state.block_s + 0.02:
                # past the wall that caused the last retreat: fresh start
                state.commit_next = state.commit_base
                state.retry_failures = 0
            return _publish(state, scene, q_next)
        # the same wall again escalates; a farther one restarts the ladder
        if s <= state.block_s + 0.02:
            state.retry_failures += 1
        else:
            state.block_s = s
            state.retry_failures = 1
            state.commit_next = state.commit_base
        state.phase = "backstep"
        state.backstep_commit = state.commit_next
        state.commit_next = min(state.commit_next * 2, state.commit_cap)

    # owe one more retreat step toward home
    back = q_0 - q_t
    bn = float(np.linalg.norm(back))
    if bn <= 1e-12:
        state.backstep_commit = 0
        return state.q_t
    # in a margin pocket (the scene intruded into the planned clearance,
    # or the arm skirts a wall both ways) insisting on the full margin
    # would freeze the follower exactly when escape matters most, so a
    # failed retreat retries with a floor just under the standing
    # clearance: it may back out, but never plan closer than it stands
    report = pairwise_distances(scene, q_t, cull_above=0.05)
    d_now = float(report.distances.min()) if report.distances.size else np.inf
    emergency = min(state.collision_margin, 0.8 * d_now)
    for floor in (state.collision_margin, emergency):
        step = min(tau, bn)
        for _ in range(3):
            q_back = q_t + (step / bn) * back
            if not swept_collides(scene, q_t, q_back, floor, res):
                state.backstep_commit -= 1
                state.backstep_count += 1
                state.last_backstep = True
                return _publish(state, scene, q_back)
            step /= 2.0
        if emergency >= state.collision_margin:
            break   # no slack left to give
    state.stuck = True
    state.stuck_ticks += 1
    return state.q_t


def grasp_and_lift(state: PlannerState, scene: SceneState) -> np.ndarray:
    """Closure and lift phases, one tick per call.

    grasp: validate geometrically against the scene's (true) target: the
    tool point inside the cuboid, the object center between the jaw
    planes and the grasped width within the aperture.  Success attaches
    the object with the latched grasp offset; failure reverts to approach.
    lift: straight-line end-effector motion upward via damped
    least-squares steps until lift_height is reached.
    """
    robot = scene.robot
    if state.phase == "grasp":
        target = scene.target
        fk = robot.fk(state.q_t)
        jaw = fk.ee_pose.rotation[:, 1]
        offset = float(jaw @ (target.pose.translation - fk.ee_pose.translation))
        width = float(2.0 * np.sum(target.half_extents
                                   * np.abs(target.pose.rotation.T @ jaw)))
        ok = (_ee_inside(scene, state.q_t, target)
              and abs(offset) <= robot.gripper_aperture / 2.0
              and width <= robot.gripper_aperture)
        if not ok:
            # a trigger that keeps failing closure means the estimate the
            # trigger fired on does not match the object actually there
            state.grasp_failures += 1
            state.phase = "approach"
            return state.q_t
        grasp_offset = fk.ee_pose.inverse() @ target.pose
        scene.attach(scene.target_index, grasp_offset)
        state.lift_anchor = fk.ee_pose
        state.lifted = 0.0
        state.phase = "lift"
        return state.q_t

    if state.phase == "lift":
        if scene.attached is None:
            # the object was yanked out of the gripper; chase it again
            state.phase = "approach"
            state.q_star = None
            state.q_star_index = -1
            state.lift_anchor = None
            return state.q_t
        fk = robot.fk(state.q_t)
        step = min(state.lift_step, state.lift_height - state.lifted)
        anchor = state.lift_anchor
        goal_p = anchor.translation + np.array([0.0, 0.0, state.lifted + step])
        e_p = goal_p - fk.ee_pose.translation
        R_err = anchor.rotation @ fk.ee_pose.rotation.T
        # rotation log for the small-angle orientation hold
        w = 0.5 * np.array([R_err[2, 1] - R_err[1, 2],
                            R_err[0, 2] - R_err[2, 0],
                            R_err[1, 0] - R_err[0, 1]])
        Jp, Jw = robot.ee_jacobian(fk)
        J = np.vstack([Jp, Jw])
        e = np.concatenate([e_p, w])
        dq = J.T @ np.linalg.solve(J @ J.T + 0.05**2 * np.eye(6), e)
        _publish(state, scene, state.q_t + dq)
        state.lifted += step
        if state.lifted >= state.lift_height - 1e-9:
            state.phase = "done"
        return state.q_t

    return state.q_t


def advance(state: PlannerState, scene: SceneState,
            ranked: RankedPool | None) -> np.ndarray:
    """Full planner tick: dispatch on phase, detect the grasp trigger.

    A grasp is set aside (cooldown + retarget) when forward retries keep
    failing after escalating retreats, when the follower sits parked at
    q_star without the grasp trigger firing, or when both the forward and
    the retreat direction stay blocked; either way the configuration is
    unreachable or useless and the next candidate deserves the ticks.
    """
    state.ticks += 1
    state.blocked = [(qb, t) for qb, t in state.blocked if t > state.ticks]
    if state.phase in ("approach", "backstep"):
        q = plan_step(state, scene, ranked)
        if state.q_star is not None:
            if (state.retry_failures >= state.retry_limit
                    or state.hold_ticks >= state.hold_limit
                    or state.stuck_ticks >= state.stuck_limit
                    or state.grasp_failures >= state.grasp_failure_limit):
                _set_aside(state)
        if (state.q_star is not None
                and np.linalg.norm(state.q_t - state.q_star) <= state.tau
                and _ee_inside(scene, state.q_t, scene.target)):
            state.phase = "grasp"
        return q
    if state.phase in ("grasp", "lift"):
        return grasp_and_lift(state, scene)
    return state.q_t
