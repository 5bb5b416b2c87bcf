"""Serial-chain robot model: forward kinematics, geometric Jacobians, capsules.

The default model is a fixed 7-DoF arm with Panda-like dimensions and
joint limits, mounted at the world origin on the table plane z = 0. Each
joint is revolute: link frame i = link frame (i-1) * fixed offset *
rotation about the joint axis.  Collision geometry is one capsule per
link, expressed in that link's frame; the gripper jaw sweep is its own
capsule flagged ``grasp_volume`` so distance checks can let it straddle
the grasp target (a grasp is not a self-inflicted collision) while still
treating it as solid against everything else.

Models are also loadable from a YAML file; see ``RobotModel.from_config``
for the schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .geometry import Pose, so3_exp

__all__ = ["JointSpec", "CapsuleSpec", "RobotModel", "FkResult", "default_robot"]


@dataclass(frozen=True)
class JointSpec:
    offset: Pose          # parent link frame -> joint frame, fixed
    axis: np.ndarray      # unit rotation axis in the joint frame
    limits: tuple         # (lo, hi) radians

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", axis / np.linalg.norm(axis))
        lo, hi = self.limits
        if not lo < hi:
            raise ValueError(f"joint limits must satisfy lo < hi, got {self.limits}")


@dataclass(frozen=True)
class CapsuleSpec:
    link: int             # index of the link frame the capsule is rigid to
    p0: np.ndarray        # endpoints in the link frame
    p1: np.ndarray
    radius: float
    collides_table: bool = True
    grasp_volume: bool = False  # jaw sweep; may straddle the grasp target only

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float))
        if self.radius <= 0:
            raise ValueError("capsule radius must be > 0")


@dataclass
class FkResult:
    """Per-link world poses plus joint origins/axes for Jacobians."""

    link_poses: list
    ee_pose: Pose
    joint_origins: np.ndarray   # (n, 3) world origins of each joint
    joint_axes: np.ndarray      # (n, 3) world joint axes


@dataclass
class RobotModel:
    joints: list
    capsules: list
    ee_offset: Pose
    home: np.ndarray
    gripper_aperture: float = 0.08
    name: str = "robot"

    def __post_init__(self):
        self.home = np.asarray(self.home, dtype=float)
        # flat copies of the chain constants; fk is called in inner loops
        self._off_R = np.stack([j.offset.rotation for j in self.joints])
        self._off_t = np.stack([j.offset.translation for j in self.joints])
        self._jaxes = np.stack([j.axis for j in self.joints])
        self._all_z = bool(np.allclose(self._jaxes, [0.0, 0.0, 1.0]))

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def limits(self) -> np.ndarray:
        return np.array([j.limits for j in self.joints])

    def fk(self, q: np.ndarray) -> FkResult:
        """Chain product of joint transforms; also reports joint axes/origins in world."""
        q = np.asarray(q, dtype=float)
        n = self.n_joints
        if q.shape != (n,):
            raise ValueError(f"expected q of length {n}, got shape {q.shape}")
        if self._all_z:
            c, s = np.cos(q), np.sin(q)
            Rj = np.zeros((n, 3, 3))
            Rj[:, 0, 0] = c
            Rj[:, 0, 1] = -s
            Rj[:, 1, 0] = s
            Rj[:, 1, 1] = c
            Rj[:, 2, 2] = 1.0
        else:
            Rj = np.stack([so3_exp(self._jaxes[i] * q[i]) for i in range(n)])

        origins = np.empty((n, 3))
        axes = np.empty((n, 3))
        poses = []
        R = np.eye(3)
        t = np.zeros(3)
        for i in range(n):
            t = R @ self._off_t[i] + t
            R = R @ self._off_R[i]
            origins[i] = t
            axes[i] = R @ self._jaxes[i]
            R = R @ Rj[i]
            poses.append(Pose(R, t))
        ee = Pose(R @ self.ee_offset.rotation, R @ self.ee_offset.translation + t)
        return FkResult(poses, ee, origins, axes)

    def point_jacobian(self, fk: FkResult, point_world: np.ndarray, link: int) -> np.ndarray:
        """(3, n) position Jacobian of a point rigidly attached to ``link``."""
        J = np.zeros((3, self.n_joints))
        k = link + 1
        J[:, :k] = np.cross(fk.joint_axes[:k], point_world - fk.joint_origins[:k]).T
        return J

    def ee_jacobian(self, fk: FkResult) -> tuple[np.ndarray, np.ndarray]:
        """(3, n) position and (3, n) angular-velocity Jacobians of the end-effector frame."""
        Jp = self.point_jacobian(fk, fk.ee_pose.translation, self.n_joints - 1)
        Jw = fk.joint_axes.T.copy()
        return Jp, Jw

    def capsule_endpoints(self, fk: FkResult) -> tuple[np.ndarray, np.ndarray]:
        """World endpoints of every capsule, shape (n_capsules, 3) each."""
        p0 = np.empty((len(self.capsules), 3))
        p1 = np.empty((len(self.capsules), 3))
        for k, cap in enumerate(self.capsules):
            T = fk.link_poses[cap.link]
            p0[k] = T.apply(cap.p0)
            p1[k] = T.apply(cap.p1)
        return p0, p1

    def within_limits(self, q: np.ndarray) -> bool:
        lim = self.limits
        return bool(np.all(q >= lim[:, 0]) and np.all(q <= lim[:, 1]))

    @staticmethod
    def from_config(path) -> "RobotModel":
        """Load a model from YAML.

        Schema::

            name: my-arm
            joints:
              - {xyz: [0, 0, 0.333], rpy: [0, 0, 0], axis: [0, 0, 1], limits: [-2.9, 2.9]}
              - ...
            capsules:
              - {link: 0, p0: [0, 0, -0.28], p1: [0, 0, 0], radius: 0.06, table: false}
              - {link: 6, p0: [0, 0, 0.08], p1: [0, 0, 0.21], radius: 0.04, grasp: true}
            ee: {xyz: [0, 0, 0.21], rpy: [0, 0, 0]}
            gripper: {aperture: 0.08}
            home: [0, -0.785, 0, -2.356, 0, 1.571, 0.785]
        """
        with open(path) as f:
            raw = yaml.safe_load(f)
        joints = [
            JointSpec(_pose_from_entry(j), j.get("axis", [0, 0, 1]), tuple(j["limits"]))
            for j in raw["joints"]
        ]
        capsules = [
            CapsuleSpec(c["link"], c["p0"], c["p1"], c["radius"], c.get("table", True),
                        c.get("grasp", False))
            for c in raw.get("capsules", [])
        ]
        ee = _pose_from_entry(raw.get("ee", {}))
        home = raw.get("home", [0.0] * len(joints))
        aperture = raw.get("gripper", {}).get("aperture", 0.08)
        return RobotModel(joints, capsules, ee, home, aperture, raw.get("name", "robot"))


def _pose_from_entry(entry: dict) -> Pose:
    xyz = np.asarray(entry.get("xyz", [0.0, 0.0, 0.0]), dtype=float)
    roll, pitch, yaw = entry.get("rpy", [0.0, 0.0, 0.0])
    R = so3_exp(np.array([0.0, 0.0, yaw])) @ so3_exp(np.array([0.0, pitch, 0.0])) @ so3_exp(
        np.array([roll, 0.0, 0.0]))
    return Pose(R, xyz)


# Modified-DH rows (alpha_{i-1}, a_{i-1}, d_i) of the default 7-DoF chain,
# dimensions after the Franka Panda datasheet.
_DH = [
    (0.0, 0.0, 0.333),
    (-np.pi / 2, 0.0, 0.0),
    (np.pi / 2, 0.0, 0.316),
    (np.pi / 2, 0.0825, 0.0),
    (-np.pi / 2, -0.0825, 0.384),
    (np.pi / 2, 0.0, 0.0),
    (np.pi / 2, 0.088, 0.0),
]

_LIMITS = [
    (-2.8973, 2.8973),
    (-1.7628, 1.7628),
    (-2.8973, 2.8973),
    (-3.0718, -0.0698),
    (-2.8973, 2.8973),
    (-0.0175, 3.7525),
    (-2.8973, 2.8973),
]

HOME_CONFIG = np.array([0.0, -np.pi / 4, 0.0, -3 * np.pi / 4, 0.0, np.pi / 2, np.pi / 4])

# flange (0.107) plus tool center point of the parallel-jaw hand
_FLANGE_TO_TCP = 0.2104


def _dh_offset(alpha: float, a: float, d: float) -> Pose:
    Rx = so3_exp(np.array([alpha, 0.0, 0.0]))
    return Pose(Rx, Rx @ np.array([a, 0.0, d]))


def default_robot() -> RobotModel:
    """The built-in 7-DoF arm with Panda-like dimensions, capsules included.

    Capsules span each link from its joint origin to the child joint origin
    (skipping zero-length segments); the flange-and-hand capsule stops
    0.13 m short of the tool center point (with the 4 cm radius this puts
    the modeled palm face 9 cm behind the tool point), and the remaining
    jaw sweep out to the tool point is a separate ``grasp_volume`` capsule
    that only the grasp target may overlap.

    The tool frame is rotated so its x axis points out of the gripper
    along the fingers (the approach direction) and its y axis is the jaw
    opening direction; alignment costs read end-effector axes in exactly
    this convention.
    """
    joints = [
        JointSpec(_dh_offset(*row), np.array([0.0, 0.0, 1.0]), lim)
        for row, lim in zip(_DH, _LIMITS)
    ]
    # columns: tool x = flange z, tool y = flange y, tool z = -flange x
    tool_R = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    ee = Pose(tool_R, np.array([0.0, 0.0, _FLANGE_TO_TCP]))

    radii = [0.065, 0.065, 0.06, 0.055, 0.05, 0.05, 0.045]
    capsules = []
    for i in range(len(joints)):
        child_t = joints[i + 1].offset.translation if i + 1 < len(joints) else None
        if child_t is not None and np.linalg.norm(child_t) > 1e-9:
            capsules.append(CapsuleSpec(i, np.zeros(3), child_t, radii[i],
                                        collides_table=i >= 1))
    # base column below joint 1 (mounted, never checked against the table)
    capsules.insert(0, CapsuleSpec(0, np.array([0.0, 0.0, -0.28]), np.zeros(3), 0.08,
                                   collides_table=False))
    # flange + hand body, fingers excluded
    capsules.append(CapsuleSpec(6, np.zeros(3), np.array([0.0, 0.0, _FLANGE_TO_TCP - 0.13]),
                                0.04))
    # open-jaw sweep out to the tool point; straddling the grasp target is
    # legitimate, so distance checks exempt exactly that one pairing.  The
    # radius models the lateral jaw span, not finger thickness, so checking
    # it against the table would over-approximate and forbid flat grasps.
    capsules.append(CapsuleSpec(6, np.array([0.0, 0.0, _FLANGE_TO_TCP - 0.13]),
                                np.array([0.0, 0.0, _FLANGE_TO_TCP]), 0.04,
                                collides_table=False, grasp_volume=True))
    return RobotModel(joints, capsules, ee, HOME_CONFIG, 0.08, "panda7")
