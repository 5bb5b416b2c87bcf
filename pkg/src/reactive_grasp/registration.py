"""Generalized-ICP pointcloud registration with a pose prior.

Plane-to-plane ICP: every point carries a regularized local covariance
(eigenvalues replaced by (1, 1, epsilon) in the local eigenbasis), the
alignment objective is the sum of Mahalanobis distances of corresponding
points under the combined covariance, and the inner minimization runs
damped Gauss-Newton on a 6-vector (rotation tangent, translation).

Everything here is deterministic: correspondences come from a kd-tree over
the target built once per call, queried single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, Pose, so3_exp

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "NoOverlapError",
    "InsufficientPointsError",
    "estimate_covariances",
    "register",
    "load_ply",
    "save_ply",
]


class NoOverlapError(RuntimeError):
    """No correspondences within the gating distance at the initial guess."""


class InsufficientPointsError(ValueError):
    """Cloud too small for the requested neighborhood size."""


@dataclass(frozen=True)
class RegistrationConfig:
    max_iterations: int = 50
    correspondence_max_dist: float = 0.10
    convergence_eps: float = 1e-6
    covariance_k: int = 20
    epsilon_plane: float = 1e-3
    # correspondences beyond trim_factor times the median distance are
    # treated as cross-surface mismatches and excluded from the step
    trim_factor: float = 3.0
    trim_floor: float = 0.01

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.covariance_k < 4:
            raise ValueError("covariance_k must be >= 4")
        if not 0.0 < self.epsilon_plane < 1.0:
            raise ValueError("epsilon_plane must be in (0, 1)")
        if self.trim_factor <= 1.0:
            raise ValueError("trim_factor must be > 1")
        if self.trim_floor < 0.0:
            raise ValueError("trim_floor must be >= 0")


@dataclass
class RegistrationResult:
    transform: Pose
    fitness: float
    rmse: float
    iterations: int
    converged: bool
    # (objective_before, objective_after) per accepted iteration, fixed correspondences
    objective_history: list = field(default_factory=list)


def estimate_covariances(cloud: PointCloud, k: int = 20, epsilon_plane: float = 1e-3) -> PointCloud:
    """Attach the G-ICP regularized covariance to every point.

    For each point the scatter matrix of its k nearest neighbors (self
    included) is eigen-decomposed and the eigenvalues are replaced with
    (epsilon, 1, 1), smallest first, keeping the eigenbasis.  The smallest
    principal direction is the estimated surface normal.

    Raises:
        InsufficientPointsError: if the cloud has fewer than k points.
    """
    if len(cloud) < k:
        raise InsufficientPointsError(f"need >= {k} points, cloud has {len(cloud)}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k, workers=1)
    neigh = cloud.points[idx]                    # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(scatter)            # ascending eigenvalues
    vals = np.array([epsilon_plane, 1.0, 1.0])
    covs = np.einsum("nij,j,nkj->nik", vecs, vals, vecs)
    return PointCloud(cloud.points.copy(), covs)


def _skew_batch(v: np.ndarray) -> np.ndarray:
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def register(
    source: PointCloud,
    target: PointCloud,
    initial_guess: Pose | None = None,
    config: RegistrationConfig | None = None,
) -> RegistrationResult:
    """Align ``source`` to ``target``; the returned transform maps source points onto the target.

    Correspondences are single nearest neighbors in the target within
    ``correspondence_max_dist``, additionally trimmed to
    ``trim_factor`` times the median distance of the current iteration
    (never below ``trim_floor``) so that source points without a visible
    counterpart do not drag the estimate toward the wrong surface.  The
    reported fitness still counts every point within the max distance.
    Each Gauss-Newton step is accepted only if it does not increase the
    fixed-correspondence objective (step halving otherwise), so the
    recorded objective history is non-increasing per accepted step.

    Raises:
        NoOverlapError: if no correspondences exist at the initial guess.
        ValueError: if either cloud is empty.
    """
    config = config or RegistrationConfig()
    if len(source) == 0 or len(target) == 0:
        raise ValueError("registration requires non-empty clouds")
    guess = initial_guess or Pose.identity()

    src = source if source.covariances is not None else estimate_covariances(
        source, min(config.covariance_k, len(source)), config.epsilon_plane)
    tgt = target if target.covariances is not None else estimate_covariances(
        target, min(config.covariance_k, len(target)), config.epsilon_plane)

    tree = cKDTree(tgt.points)
    R = guess.rotation.copy()
    t = guess.translation.copy()
    history: list[tuple[float, float]] = []
    converged = False
    iterations = 0
    eye6 = np.eye(6)

    for iterations in range(1, config.max_iterations + 1):
        moved = src.points @ R.T + t
        dist, idx = tree.query(moved, workers=1)
        inlier = dist <= config.correspondence_max_dist
        if not np.any(inlier):
            if iterations == 1:
                raise NoOverlapError(
                    f"no correspondences within {config.correspondence_max_dist} m at the initial guess")
            break
        # source points whose visible counterpart is missing (self-occlusion,
        # partial view) grab a much farther neighbor than the rest; drop them
        gate = max(config.trim_factor * float(np.median(dist[inlier])),
                   config.trim_floor)
        inlier &= dist <= gate

        p = src.points[inlier]
        x = moved[inlier]
        q = tgt.points[idx[inlier]]
        # combined covariance and its inverse, fixed for this iteration
        M = tgt.covariances[idx[inlier]] + np.einsum("ij,njk,lk->nil", R, src.covariances[inlier], R)
        W = np.linalg.inv(M)
        r = x - q

        def objective(Rc, tc):
            rc = (p @ Rc.T + tc) - q
            return float(np.einsum("ni,nij,nj->", rc, W, rc))

        f0 = objective(R, t)

        # normal equations for the 6-vector (rotation tangent w, translation dt),
        # residual jacobian J = [-skew(x) | I] under the left update x' = exp(w) x + dt
        A = -_skew_batch(x)
        WA = np.einsum("nij,njk->nik", W, A)
        H = np.zeros((6, 6))
        H[:3, :3] = np.einsum("nji,njk->ik", A, WA)
        H[:3, 3:] = np.einsum("nji,njk->ik", A, W)
        H[3:, :3] = H[:3, 3:].T
        H[3:, 3:] = W.sum(axis=0)
        g = np.zeros(6)
        g[:3] = np.einsum("nji,njk,nk->i", A, W, r)
        g[3:] = np.einsum("nij,nj->i", W, r)

        damping = 1e-12
        try:
            step = np.linalg.solve(H + damping * eye6, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, -g, rcond=None)[0]

        # step halving keeps the fixed-correspondence objective non-increasing
        accepted = False
        scale = 1.0
        for _ in range(12):
            dR = so3_exp(step[:3] * scale)
            R_new = dR @ R
            t_new = dR @ t + step[3:] * scale
            f1 = objective(R_new, t_new)
            if f1 <= f0 + 1e-15:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            converged = True
            break

        history.append((f0, f1))
        R, t = R_new, t_new
        if np.linalg.norm(step * scale) < config.convergence_eps:
            converged = True
            break

    pose = Pose(R, t).orthonormalized()
    moved = src.points @ pose.rotation.T + pose.translation
    dist, _ = tree.query(moved, workers=1)
    inlier = dist <= config.correspondence_max_dist
    fitness = float(inlier.mean())
    rmse = float(np.sqrt(np.mean(dist[inlier] ** 2))) if np.any(inlier) else float("inf")
    return RegistrationResult(pose, fitness, rmse, iterations, converged, history)


def load_ply(path) -> PointCloud:
    """Read an ASCII PLY file with x y z vertex properties (extra properties ignored)."""
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError("not a PLY file")
        n_vertices = 0
        props: list[str] = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError("unexpected end of PLY header")
            parts = line.split()
            if parts[:2] == ["format", "ascii"]:
                pass
            elif parts[0] == "element" and parts[1] == "vertex":
                n_vertices = int(parts[2])
            elif parts[0] == "property" and n_vertices:
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        try:
            cols = [props.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise ValueError(f"PLY vertex element lacks x y z properties: {props}")
        pts = np.empty((n_vertices, 3))
        for i in range(n_vertices):
            vals = f.readline().split()
            pts[i] = [float(vals[c]) for c in cols]
    return PointCloud(pts)


def save_ply(path, cloud: PointCloud) -> None:
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for x, y, z in cloud.points:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
