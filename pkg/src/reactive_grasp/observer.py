"""Grasp configuration observer: a pool of candidates evolved every tick.

Each candidate is a joint configuration optimized by damped Gauss-Newton
on a weighted nonlinear least-squares objective over the task maps, plus a
random orthonormal basis that diversifies the approach axis while the
candidate is young.  Age-dependent sigmoids hand the weight over from the
random-basis term to the real position/alignment/collision terms, so the
pool spreads out first and converges to distinct grasps afterwards.

Ranking is geometric: candidates whose end-effector lands inside the
target cuboid come first, ordered by shape-normalized distance to the
center, ties broken by homing cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .geometry import Cuboid
from .scene import SceneState, TaskMapParams, task_maps

__all__ = [
    "GraspCandidate",
    "ObserverConfig",
    "RankedPool",
    "age_weights",
    "random_basis",
    "make_pool",
    "evaluate_cost",
    "solve_candidate",
    "rank",
    "tick",
    "COST_TERMS",
]

# order of the per-term entries in GraspCandidate.cost
COST_TERMS = ("pos", "align", "coll", "limit", "home")


def age_weights(age: float, alpha: float) -> tuple[float, float]:
    """Increasing/decreasing sigmoid pair centered at alpha/2; sums to 1."""
    f_inc = float(expit(age - alpha / 2.0))
    f_dec = float(expit(alpha / 2.0 - age))
    return f_inc, f_dec


def random_basis(rng: np.random.Generator) -> np.ndarray:
    """Random orthonormal 3x3 basis with determinant +1 (QR of a Gaussian)."""
    Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 2] *= -1.0
    return Q


@dataclass
class GraspCandidate:
    q: np.ndarray
    cost: np.ndarray              # per-term norms, order COST_TERMS
    age: int
    basis: np.ndarray             # random orthonormal approach frame
    converged: bool = False
    index: int = 0
    outside_ticks: int = 0
    lm_damping: float = 1e-6
    scene_key: int = 0            # hash of the scene the candidate last solved against


@dataclass(frozen=True)
class ObserverConfig:
    n_candidates: int = 16
    lambda_pos: float = 10.0
    lambda_align: float = 3.0
    lambda_coll: float = 100.0
    lambda_limit: float = 100.0
    # homing stays out of the solve by default (any static pull puts a floor
    # under the position/alignment errors); ranking still reads |q - q_home|
    lambda_home: float = 0.0
    lambda_rand: float = 3.0
    w_reg: float = 1e-3           # q regularizer, small multiple of identity
    alpha: float = 20.0           # age threshold of the weighting sigmoids
    margin: float = 0.03          # collision activation distance
    gn_steps: int = 3             # solver iterations per tick
    seed: int = 0
    re_randomize_stale: bool = True   # off for the strict formulation
    jaw_axis: int = 1             # end-effector axis the jaws open along

    def __post_init__(self):
        for name in ("lambda_pos", "lambda_align", "lambda_coll", "lambda_limit",
                     "lambda_home", "lambda_rand"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.w_reg <= 0 or self.alpha <= 0 or self.margin <= 0:
            raise ValueError("w_reg, alpha and margin must be > 0")


@dataclass
class Pool:
    candidates: list
    tick_index: int = 0
    rng_seed: int = 0
    last_target: np.ndarray | None = None   # target center watched for jumps


def _hover_seed(scene: SceneState, target: Cuboid, rng: np.random.Generator,
                q0: np.ndarray) -> np.ndarray:
    """Configuration with the end-effector pulled above the target center.

    Plain damped least-squares on the position error only; obstacles are
    ignored on purpose.  The returned configuration is a solver seed, not a
    motion target, and descending from above is the approach direction most
    likely to be free, so refinement started here rarely fights the
    collision hinge.
    """
    robot = scene.robot
    lim = robot.limits
    q = q0 + 0.05 * rng.standard_normal(robot.n_joints)
    goal = target.pose.translation + np.array([0.0, 0.0, 0.16 + 0.1 * rng.random()])
    for _ in range(40):
        fk = robot.fk(q)
        err = goal - fk.ee_pose.translation
        if float(np.linalg.norm(err)) < 5e-3:
            break
        Jp, _ = robot.ee_jacobian(fk)
        dq = Jp.T @ np.linalg.solve(Jp @ Jp.T + 0.01 * np.eye(3), err)
        norm = float(np.linalg.norm(dq))
        if norm > 0.2:
            dq *= 0.2 / norm
        q = np.clip(q + dq, lim[:, 0], lim[:, 1])
    return q


def make_pool(scene: SceneState, config: ObserverConfig, q_start: np.ndarray | None = None) -> Pool:
    """Candidates warm-start at the same configuration with per-candidate bases.

    Every fourth candidate instead starts hovering above the target with
    its age weights already saturated: those seeds skip the exploratory
    childhood and give the pool a few immediately task-driven descents,
    which matters when the free approaches to the target are rare.
    """
    rng = np.random.default_rng(config.seed)
    q0 = np.asarray(q_start if q_start is not None else scene.robot.home, dtype=float)
    target = scene.target
    cands = []
    for i in range(config.n_candidates):
        if i % 4 == 3:
            q = _hover_seed(scene, target, rng, np.asarray(scene.robot.home, float))
            cands.append(GraspCandidate(q, np.zeros(len(COST_TERMS)),
                                        int(config.alpha), random_basis(rng), index=i))
        else:
            cands.append(GraspCandidate(q0.copy(), np.zeros(len(COST_TERMS)),
                                        0, random_basis(rng), index=i))
    return Pool(cands, 0, config.seed)


def _params(config: ObserverConfig, scene: SceneState) -> TaskMapParams:
    return TaskMapParams(q_home=scene.robot.home, collision_margin=config.margin)


def evaluate_cost(cand: GraspCandidate, scene: SceneState, target: Cuboid,
                  config: ObserverConfig) -> np.ndarray:
    """Per-term cost norms at the candidate's current configuration.

    The random-basis term is solver-internal and not part of the reported
    cost vector, so identical configurations report identical costs.
    """
    maps = task_maps(scene, cand.q, target, basis=None,
                     params=_params(config, scene), with_jacobians=False)
    return np.array([float(np.linalg.norm(maps[name][0])) for name in COST_TERMS])


def _residuals(scene, q, target, basis, config, f_inc, f_dec, q_ref,
               with_jacobians=True):
    """Weighted residual stack of the candidate objective at ``q``.

    The W term regularizes the solve proximally (deviation from the warm
    start ``q_ref``), so it damps each tick's motion without biasing the
    stationary point; a static pull toward a fixed posture would put a
    floor under the position and alignment errors.
    """
    maps = task_maps(scene, q, target, basis=basis, params=_params(config, scene),
                     with_jacobians=with_jacobians)
    n = len(q)
    rows_r = [np.sqrt(config.w_reg) * (q - q_ref)]
    rows_j = [np.sqrt(config.w_reg) * np.eye(n)]
    for name, lam, w in (
        ("pos", config.lambda_pos, f_inc),
        ("align", config.lambda_align, f_inc),
        ("coll", config.lambda_coll, f_inc),
        ("limit", config.lambda_limit, 1.0),
        ("home", config.lambda_home, 1.0),
        ("rand", config.lambda_rand, f_dec),
    ):
        if name not in maps or lam * w == 0.0:
            continue
        scale = np.sqrt(lam * w)
        value, jac = maps[name]
        rows_r.append(scale * value)
        if with_jacobians:
            rows_j.append(scale * jac)
    r = np.concatenate(rows_r)
    return (r, np.vstack(rows_j)) if with_jacobians else (r, None)


def solve_candidate(cand: GraspCandidate, scene: SceneState, target: Cuboid,
                    config: ObserverConfig) -> GraspCandidate:
    """Advance one candidate by a bounded number of damped Gauss-Newton steps.

    The age weights gate position/alignment/collision against the
    random-basis term; joint-limit and homing terms are age-independent.
    An accepted step never increases the weighted objective (Levenberg
    damping grows on rejection, the solver never aborts).
    """
    f_inc, f_dec = age_weights(cand.age, config.alpha)
    q = cand.q.copy()
    q_ref = cand.q.copy()
    # fresh damping each tick: the scene may have moved since the last stall
    mu = 1e-6
    n = len(q)
    converged = False
    for _ in range(config.gn_steps):
        r, J = _residuals(scene, q, target, cand.basis, config, f_inc, f_dec, q_ref)
        obj = float(r @ r)
        H = J.T @ J
        g = J.T @ r
        accepted = False
        for _ in range(10):
            try:
                step = np.linalg.solve(H + mu * np.eye(n), -g)
            except np.linalg.LinAlgError:
                mu = max(mu * 10.0, 1e-8)
                continue
            if np.linalg.norm(step) < 1e-10:
                converged = True
                break
            q_new = q + step
            r_new, _ = _residuals(scene, q_new, target, cand.basis, config,
                                  f_inc, f_dec, q_ref, with_jacobians=False)
            if float(r_new @ r_new) <= obj:
                accepted = True
                break
            mu = max(mu * 10.0, 1e-8)
        if not accepted or converged:
            converged = True
            break
        q = q_new
        mu = max(mu / 3.0, 1e-9)
        if np.linalg.norm(step) < 1e-8:
            converged = True
            break
    cand.q = q
    cand.lm_damping = mu
    cand.converged = converged
    return cand


@dataclass
class RankedEntry:
    candidate: GraspCandidate
    inside: bool
    feasible: bool
    distance: float          # shape-normalized distance to the cuboid center
    home_cost: float


@dataclass
class RankedPool:
    entries: list
    any_feasible: bool

    @property
    def best(self) -> GraspCandidate | None:
        """Top feasible inside candidate, else the overall front of the order."""
        for e in self.entries:
            if e.inside and e.feasible:
                return e.candidate
        return self.entries[0].candidate if self.entries else None


def _grasped_width(target: Cuboid, jaw_dir: np.ndarray) -> float:
    """Extent of the cuboid along the jaw-opening direction (support width)."""
    return float(2.0 * np.sum(target.half_extents * np.abs(target.pose.rotation.T @ jaw_dir)))


def rank(pool: Pool, scene: SceneState, target: Cuboid, config: ObserverConfig) -> RankedPool:
    """Strict total order over the pool.

    Candidates with the end-effector inside the cuboid (and a graspable
    width within the jaw aperture) come first, by ascending shape-normalized
    distance to the center; ties fall back to homing cost, then the
    candidate index.  Outside candidates are ordered best-effort by
    Euclidean distance to the box.
    """
    entries = []
    inv = target.pose.inverse()
    for cand in pool.candidates:
        fk = scene.robot.fk(cand.q)
        p_local = inv.apply(fk.ee_pose.translation)
        inside = bool(np.all(np.abs(p_local) <= target.half_extents))
        jaw_dir = fk.ee_pose.rotation[:, config.jaw_axis]
        feasible = _grasped_width(target, jaw_dir) <= scene.robot.gripper_aperture
        if inside:
            dist = float(np.linalg.norm(p_local / target.half_extents))
        else:
            dist = float(np.linalg.norm(np.maximum(np.abs(p_local) - target.half_extents, 0.0)))
        home = float(np.linalg.norm(cand.q - scene.robot.home))
        entries.append(RankedEntry(cand, inside, feasible, dist, home))

    entries.sort(key=lambda e: (not e.inside, not e.feasible, e.distance,
                                e.home_cost, e.candidate.index))
    any_feasible = any(e.inside and e.feasible for e in entries)
    return RankedPool(entries, any_feasible)


def _scene_key(scene: SceneState, target: Cuboid) -> int:
    """Hash of everything the candidate objective reads from the scene."""
    h = [target.pose.rotation.tobytes(), target.pose.translation.tobytes(),
         target.half_extents.tobytes(),
         scene.attached[0] if scene.attached is not None else -1]
    for cub in scene.objects:
        h.append(cub.pose.rotation.tobytes())
        h.append(cub.pose.translation.tobytes())
        h.append(cub.half_extents.tobytes())
    return hash(tuple(h))


def tick(pool: Pool, scene: SceneState, target: Cuboid, config: ObserverConfig) -> Pool:
    """One observer iteration: age, re-evaluate costs live, advance the solver.

    A candidate whose solve already converged against a scene that has not
    changed since, and whose age weights have saturated, is left alone:
    re-running the solver there is the identity, and on a static scene its
    cost vector is unchanged too.

    A target jump of more than the box diagonal reseeds every candidate
    from the homing posture: gradient flow from the stale grasps would have
    to drag the arm through whatever now sits between them and the box,
    while from above the descent is usually free.
    """
    pool.tick_index += 1
    rng = np.random.default_rng((pool.rng_seed, pool.tick_index))
    t_now = target.pose.translation
    jumped = (pool.last_target is not None
              and float(np.linalg.norm(t_now - pool.last_target))
              > 2.0 * float(np.linalg.norm(target.half_extents)))
    pool.last_target = t_now.copy()
    if jumped:
        home = np.asarray(scene.robot.home, dtype=float)
        for cand in pool.candidates:
            if cand.index % 4 == 3:
                cand.q = _hover_seed(scene, target, rng, home)
                cand.age = int(config.alpha)
            else:
                cand.q = home + 0.1 * rng.standard_normal(len(home))
                cand.age = int(config.alpha / 2)
            cand.basis = random_basis(rng)
            cand.outside_ticks = 0
            cand.converged = False
    inv = target.pose.inverse()
    key = _scene_key(scene, target)
    for cand in pool.candidates:
        cand.age += 1
        settled = (cand.converged and cand.scene_key == key
                   and cand.age > 2 * config.alpha)
        if not settled:
            solve_candidate(cand, scene, target, config)
            cand.cost = evaluate_cost(cand, scene, target, config)
            cand.scene_key = key
        p_local = inv.apply(scene.robot.fk(cand.q).ee_pose.translation)
        if np.all(np.abs(p_local) <= target.half_extents):
            cand.outside_ticks = 0
        else:
            cand.outside_ticks += 1
        if config.re_randomize_stale and cand.outside_ticks > 2 * config.alpha:
            # a candidate stuck outside is usually pinned on a hinge ridge;
            # half the restarts hop it straight above the target instead of
            # wandering off the same basin again
            if rng.random() < 0.5:
                cand.q = _hover_seed(scene, target, rng, scene.robot.home)
                cand.age = int(config.alpha)
            else:
                cand.age = 0
            cand.basis = random_basis(rng)
            cand.outside_ticks = 0
            cand.converged = False
    return pool
