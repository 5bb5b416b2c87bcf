"""Signed distances between link capsules, oriented boxes and the table plane.

The capsule-box distance minimizes the box signed-distance field along the
capsule axis segment.  The SDF of a convex body is convex, so the 1D
problem is solved by ternary section, batched over all pairs.  Negative
values mean penetration (depth of the axis point inside the box);
subtracting the capsule radius happens at the call site.
"""

from __future__ import annotations

import numpy as np

from .geometry import Cuboid

__all__ = [
    "box_sdf",
    "segment_box_distance",
    "segment_box_distance_batch",
    "segment_box_lower_bound",
    "segment_plane_distance",
]

# interval shrinks by 2/3 per iteration; 48 leaves ~3e-9 of the segment
_TERNARY_ITERS = 48


def box_sdf(points_local: np.ndarray, half_extents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance and gradient of an origin-centered box, both in the box frame.

    Outside: Euclidean distance to the surface.  Inside: negative distance
    to the nearest face; the gradient then points along the axis of that
    face (lowest axis index on ties).
    """
    p = np.atleast_2d(points_local)
    qv = np.abs(p) - half_extents
    outside = np.maximum(qv, 0.0)
    out_norm = np.linalg.norm(outside, axis=-1)
    inside_dist = np.minimum(qv.max(axis=-1), 0.0)
    sdf = out_norm + inside_dist

    grad = np.zeros_like(p)
    is_out = out_norm > 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        grad_out = np.sign(p) * outside / np.where(out_norm > 0, out_norm, 1.0)[..., None]
    grad[is_out] = grad_out[is_out]
    if np.any(~is_out):
        axis = np.argmax(qv[~is_out], axis=-1)
        g_in = np.zeros((int((~is_out).sum()), 3))
        g_in[np.arange(len(g_in)), axis] = np.sign(p[~is_out][np.arange(len(g_in)), axis])
        # a point exactly at the center has zero sign; push along the tied axis
        zero = g_in[np.arange(len(g_in)), axis] == 0
        g_in[zero, axis[zero]] = 1.0
        grad[~is_out] = g_in
    return sdf, grad


def _sdf_values(pts: np.ndarray, half_extents: np.ndarray) -> np.ndarray:
    """Value-only box SDF for stacked probe points, (..., P, 3) against (P, 3)."""
    qv = np.abs(pts) - half_extents
    outside = np.maximum(qv, 0.0)
    out_norm = np.sqrt(np.einsum("...i,...i->...", outside, outside))
    return out_norm + np.minimum(qv.max(axis=-1), 0.0)


def segment_box_distance_batch(
    p0: np.ndarray,
    p1: np.ndarray,
    centers: np.ndarray,
    rotations: np.ndarray,
    half_extents: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Minimum box SDF along each segment, for P (segment, box) pairs at once.

    Args:
        p0, p1: world segment endpoints, (P, 3).
        centers, rotations, half_extents: box poses, (P, 3), (P, 3, 3), (P, 3).

    Returns:
        (sdf, t, closest_point_world, gradient_world): the minimizing SDF
        value per pair, its segment parameter in [0, 1], the world-frame
        axis point attaining it, and the world-frame SDF gradient there.
    """
    a = np.einsum("pij,pj->pi", rotations.transpose(0, 2, 1), p0 - centers)
    b = np.einsum("pij,pj->pi", rotations.transpose(0, 2, 1), p1 - centers)
    d = b - a

    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    for _ in range(_TERNARY_ITERS):
        third = (hi - lo) / 3.0
        m1 = lo + third
        m2 = hi - third
        probes = a[None] + np.stack([m1, m2])[:, :, None] * d[None]
        f = _sdf_values(probes, half_extents)
        take_left = f[0] < f[1]
        hi = np.where(take_left, m2, hi)
        lo = np.where(take_left, lo, m1)

    t_mid = 0.5 * (lo + hi)
    # the true minimum may sit at an endpoint of a flat region; compare explicitly
    cand = np.stack([np.zeros_like(t_mid), t_mid, np.ones_like(t_mid)])
    vals = _sdf_values(a[None] + cand[:, :, None] * d[None], half_extents)
    t = cand[np.argmin(vals, axis=0), np.arange(len(t_mid))]

    pts_local = a + t[:, None] * d
    sdf, grad_local = box_sdf(pts_local, half_extents)
    points_world = centers + np.einsum("pij,pj->pi", rotations, pts_local)
    grad_world = np.einsum("pij,pj->pi", rotations, grad_local)
    return sdf, t, points_world, grad_world


def segment_box_lower_bound(
    p0: np.ndarray,
    p1: np.ndarray,
    centers: np.ndarray,
    half_extents: np.ndarray,
) -> np.ndarray:
    """Cheap lower bound on the segment-box SDF: distance of the segment to
    the box center minus the box bounding-sphere radius.  Used to cull
    far-away pairs before the exact minimization."""
    d = p1 - p0
    denom = np.einsum("pi,pi->p", d, d)
    t = np.einsum("pi,pi->p", centers - p0, d) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = p0 + t[:, None] * d
    dist = np.linalg.norm(closest - centers, axis=-1)
    return dist - np.linalg.norm(half_extents, axis=-1)


def segment_box_distance(p0, p1, cuboid: Cuboid) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Single-pair convenience wrapper around the batch routine."""
    sdf, t, pt, grad = segment_box_distance_batch(
        np.asarray(p0, dtype=float)[None],
        np.asarray(p1, dtype=float)[None],
        cuboid.pose.translation[None],
        cuboid.pose.rotation[None],
        cuboid.half_extents[None],
    )
    return float(sdf[0]), float(t[0]), pt[0], grad[0]


def segment_plane_distance(p0: np.ndarray, p1: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Distance of a segment to the table plane z = 0 (signed, negative below).

    Returns (distance, closest endpoint, gradient); the gradient is +z.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    if p0[2] <= p1[2]:
        return float(p0[2]), p0, np.array([0.0, 0.0, 1.0])
    return float(p1[2]), p1, np.array([0.0, 0.0, 1.0])
