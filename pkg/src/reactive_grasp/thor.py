"""2D template tracking with long-term/short-term template memory.

A fixed pool of ten templates (five long-term, five short-term) drives a
normalized cross-correlation matcher.  The short-term memory is a FIFO
refreshed every ``stm_period`` frames; the long-term memory admits a new
template only when it is similar enough to the ground-truth template and
strictly grows the parallelotope volume spanned by the five long-term
feature vectors.

Features are classical and deterministic: the patch is resampled to a
fixed resolution, mean-subtracted, concatenated with its x/y gradient
magnitude maps and L2-normalized.  Template similarity is the inner
product of these unit vectors, so self-similarity is exactly 1.  The
extractor is a plain function and can be swapped for a learned one
without touching the memory logic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve

from .geometry import Rect

__all__ = [
    "Template",
    "TemplateModule",
    "TrackState",
    "MatcherConfig",
    "DegenerateMemoryError",
    "extract_features",
    "crop_patch",
    "similarity",
    "gram_matrix",
    "parallelotope_volume",
    "match",
    "depth_interval_mask",
    "dump_templates",
]

FEATURE_RES = 32
MEMORY_SIZE = 5


class DegenerateMemoryError(RuntimeError):
    """All short-term similarities collapsed; the memory must be reinitialized."""


def crop_patch(image: np.ndarray, rect: Rect, res: int = FEATURE_RES) -> np.ndarray:
    """Bilinearly resample the rectangle to a (res, res) patch.

    Pixel centers sit at integer coordinates, matching the camera model.
    """
    u = rect.x0 + (np.arange(res) + 0.5) * rect.width / res
    v = rect.y0 + (np.arange(res) + 0.5) * rect.height / res
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return map_coordinates(np.asarray(image, dtype=float), [vv, uu], order=1, mode="nearest")


def extract_features(patch: np.ndarray) -> tuple[np.ndarray, bool]:
    """Patch -> unit feature vector, plus a low-texture flag.

    The vector concatenates the mean-subtracted intensities with the x and
    y gradient magnitude maps.  An all-constant patch has zero energy and
    falls back to a uniform unit vector, flagged low-texture.
    """
    p = np.asarray(patch, dtype=float)
    if p.size == 0:
        raise ValueError("empty patch")
    if p.shape != (FEATURE_RES, FEATURE_RES):
        p = _resample_to(p, FEATURE_RES)
    gy, gx = np.gradient(p)
    vec = np.concatenate([(p - p.mean()).ravel(), np.abs(gx).ravel(), np.abs(gy).ravel()])
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return np.full(vec.size, 1.0 / np.sqrt(vec.size)), True
    return vec / norm, False


def _resample_to(img: np.ndarray, res: int) -> np.ndarray:
    return crop_patch(img, Rect(-0.5, -0.5, img.shape[1] - 0.5, img.shape[0] - 0.5), res)


def similarity(f1: np.ndarray, f2: np.ndarray) -> float:
    return float(np.dot(f1, f2))


def gram_matrix(features: list[np.ndarray]) -> np.ndarray:
    F = np.stack(features)
    return F @ F.T


def parallelotope_volume(features: list[np.ndarray]) -> float:
    """sqrt(det(Gram)) of the feature vectors, clamped at zero for round-off."""
    return float(np.sqrt(max(np.linalg.det(gram_matrix(features)), 0.0)))


@dataclass(frozen=True)
class Template:
    patch: np.ndarray            # (FEATURE_RES, FEATURE_RES) grayscale
    feature: np.ndarray          # unit L2 norm
    source_frame: int
    low_texture: bool = False

    @staticmethod
    def from_patch(patch: np.ndarray, source_frame: int) -> "Template":
        patch = np.asarray(patch, dtype=float)
        if patch.shape != (FEATURE_RES, FEATURE_RES):
            patch = _resample_to(patch, FEATURE_RES)
        feature, low = extract_features(patch)
        return Template(patch, feature, source_frame, low)


@dataclass
class TemplateModule:
    """Long-term + short-term template stores with their Gram matrices.

    Slot 0 of the long-term memory holds the ground-truth template and is
    never replaced.  The short-term memory is strictly FIFO.
    """

    ltm: list
    stm: list
    gram_ltm: np.ndarray
    gram_stm: np.ndarray
    lower_bound: float = 0.8
    stm_period: int = 10
    _admissions: int = field(default=0, repr=False)

    @staticmethod
    def initialize(init: Template, lower_bound: float = 0.8, stm_period: int = 10) -> "TemplateModule":
        ltm = [init] * MEMORY_SIZE
        stm = [init] * MEMORY_SIZE
        g = gram_matrix([t.feature for t in ltm])
        return TemplateModule(ltm, stm, g, g.copy(), lower_bound, stm_period)

    @property
    def templates(self) -> list:
        return self.ltm + self.stm

    def ltm_volume(self) -> float:
        return parallelotope_volume([t.feature for t in self.ltm])

    def update_stm(self, crop: np.ndarray, frame_index: int) -> None:
        """Drop the oldest short-term template and append a fresh crop."""
        self.stm.pop(0)
        self.stm.append(Template.from_patch(crop, frame_index))
        self.gram_stm = gram_matrix([t.feature for t in self.stm])

    def gamma(self) -> float:
        """Admission slack from short-term diversity.

        1 - 2 / (N (N+1) G_max) * sum_{i<j} G_ij over the short-term Gram
        matrix; identical templates give 1/3, mutually dissimilar ones
        approach 1.
        """
        n = len(self.stm)
        g_max = float(self.gram_stm.max())
        if g_max <= 0.0:
            raise DegenerateMemoryError("short-term Gram matrix has no positive entry")
        upper = float(np.triu(self.gram_stm, k=1).sum())
        return 1.0 - 2.0 / (n * (n + 1) * g_max) * upper

    def try_admit_ltm(self, candidate: Template) -> tuple[bool, int | None]:
        """Attempt long-term admission; returns (admitted, replaced slot).

        Admission requires (a) similarity to the ground-truth template
        above ``lower_bound * G_11 - gamma`` and (b) a replaceable slot
        whose replacement strictly increases the parallelotope volume.
        The slot giving maximal volume wins, lowest index on ties.
        """
        g11 = float(self.gram_ltm[0, 0])
        if similarity(candidate.feature, self.ltm[0].feature) <= self.lower_bound * g11 - self.gamma():
            return False, None
        feats = [t.feature for t in self.ltm]
        current = parallelotope_volume(feats)
        best_slot, best_vol = None, current
        for slot in range(1, MEMORY_SIZE):
            trial = feats[:slot] + [candidate.feature] + feats[slot + 1:]
            vol = parallelotope_volume(trial)
            if vol > best_vol:
                best_slot, best_vol = slot, vol
        if best_slot is None:
            return False, None
        self.ltm[best_slot] = candidate
        self.gram_ltm = gram_matrix([t.feature for t in self.ltm])
        self._admissions += 1
        return True, best_slot


@dataclass
class TrackState:
    bbox: Rect
    score: float
    mask: np.ndarray | None
    frame_index: int
    lost: bool = False
    template_index: int = -1


@dataclass(frozen=True)
class MatcherConfig:
    context_factor: float = 2.0
    loss_threshold: float = 0.3
    match_res: int = FEATURE_RES


def _ncc_maps(window: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of a zero-mean patch over the window, 'valid' mode."""
    t = patch - patch.mean()
    t_norm = np.linalg.norm(t)
    if t_norm < 1e-12:
        return np.zeros((window.shape[0] - patch.shape[0] + 1,
                         window.shape[1] - patch.shape[1] + 1))
    t = t / t_norm
    kernel = np.ones_like(patch)
    n = patch.size
    num = fftconvolve(window, t[::-1, ::-1], mode="valid")
    s1 = fftconvolve(window, kernel, mode="valid")
    s2 = fftconvolve(window**2, kernel, mode="valid")
    local_var = np.maximum(s2 - s1**2 / n, 0.0)
    denom = np.sqrt(local_var)
    out = np.zeros_like(num)
    np.divide(num, denom, out=out, where=denom > 1e-9)
    return out


def match(
    frame: np.ndarray,
    module: TemplateModule,
    prior_bbox: Rect,
    config: MatcherConfig | None = None,
    frame_index: int = 0,
    depth: np.ndarray | None = None,
    depth_interval: tuple[float, float] | None = None,
) -> TrackState:
    """Localize the object near the prior box.

    A search window (prior box scaled by the context factor) is cropped and
    resampled so the prior box maps to the template resolution; every
    template is cross-correlated against it and the best peak over all ten
    wins (lowest template index on ties).  The returned box keeps the
    prior's size, centered on the peak.  When a depth image and a depth
    interval are supplied, the segmentation mask of the in-interval pixels
    inside the matched box is attached.
    """
    config = config or MatcherConfig()
    h, w = frame.shape
    window = prior_bbox.scaled(config.context_factor).clamped(w, h)
    if window.width < 2 or window.height < 2 or prior_bbox.width < 2 or prior_bbox.height < 2:
        return TrackState(prior_bbox, 0.0, None, frame_index, lost=True)

    res = config.match_res
    sx = res / prior_bbox.width
    sy = res / prior_bbox.height
    out_w = max(int(round(window.width * sx)), res)
    out_h = max(int(round(window.height * sy)), res)
    u = window.x0 + (np.arange(out_w) + 0.5) * window.width / out_w
    v = window.y0 + (np.arange(out_h) + 0.5) * window.height / out_h
    vv, uu = np.meshgrid(v, u, indexing="ij")
    resampled = map_coordinates(np.asarray(frame, dtype=float), [vv, uu], order=1, mode="nearest")

    best_score = -np.inf
    best_pos = (0, 0)
    best_idx = -1
    for i, tpl in enumerate(module.templates):
        ncc = _ncc_maps(resampled, tpl.patch)
        k = int(np.argmax(ncc))
        py, px = np.unravel_index(k, ncc.shape)
        if ncc[py, px] > best_score:
            best_score = float(ncc[py, px])
            best_pos = (py, px)
            best_idx = i

    score = float(np.clip(best_score, 0.0, 1.0))
    # peak (py, px) aligns the patch top-left with that resampled pixel
    cy = window.y0 + (best_pos[0] + res / 2.0) * window.height / out_h
    cx = window.x0 + (best_pos[1] + res / 2.0) * window.width / out_w
    bbox = Rect(cx - prior_bbox.width / 2.0, cy - prior_bbox.height / 2.0,
                cx + prior_bbox.width / 2.0, cy + prior_bbox.height / 2.0).clamped(w, h)
    lost = score < config.loss_threshold

    mask = None
    if depth is not None and depth_interval is not None and not lost:
        mask = depth_interval_mask(depth, bbox, *depth_interval)
    return TrackState(bbox, score, mask, frame_index, lost, best_idx)


def depth_interval_mask(depth: np.ndarray, bbox: Rect, z_lo: float, z_hi: float) -> np.ndarray:
    """Boolean mask of pixels inside the box whose depth lies in [z_lo, z_hi]."""
    mask = np.zeros(depth.shape, dtype=bool)
    rows, cols = bbox.to_slices()
    region = depth[rows, cols]
    mask[rows, cols] = np.isfinite(region) & (region >= z_lo) & (region <= z_hi)
    return mask


def dump_templates(module: TemplateModule, directory) -> None:
    """Write each template as a PGM image plus one features.txt sidecar."""
    import os

    os.makedirs(directory, exist_ok=True)
    names = [f"ltm{i}" for i in range(MEMORY_SIZE)] + [f"stm{i}" for i in range(MEMORY_SIZE)]
    with open(os.path.join(directory, "features.txt"), "w") as sidecar:
        for name, tpl in zip(names, module.templates):
            lo, hi = tpl.patch.min(), tpl.patch.max()
            span = hi - lo if hi > lo else 1.0
            img = np.clip((tpl.patch - lo) / span * 255.0, 0, 255).astype(np.uint8)
            with open(os.path.join(directory, f"{name}.pgm"), "wb") as f:
                f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
                f.write(img.tobytes())
            sidecar.write(f"{name} frame={tpl.source_frame} " +
                          " ".join(f"{x:.6g}" for x in tpl.feature) + "\n")
