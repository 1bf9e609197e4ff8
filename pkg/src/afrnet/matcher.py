"""Pairwise matching with local-embedding realignment, 1:1 verification and 1:N search.

The realignment pass only runs for comparisons whose global score falls in the
uncertain band ``[s_l, s_h]``: local descriptors are put in correspondence, an
affine transform is fitted, the first image is warped onto the second, both are
masked to their common foreground, re-embedded, and the two scores fused.
Any failure along the way keeps the original score.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .geometry import (BACKGROUND, AffineTransform, RansacParams, TransformLimits,
                       estimate_affine, foreground_mask, match_descriptors, overlap_masks,
                       patch_centers, transform_ok, warp_image, warp_mask)
from .model import AFRNet, ModelConfig, preprocess, similarity_theta


class MatchError(ValueError):
    pass


@dataclass(frozen=True)
class MatchParams:
    w1: float = 0.2
    w2: float = 0.8
    w3: float = 0.5
    w4: float = 0.5
    s_l: float = 0.3
    s_h: float = 0.6
    limits: TransformLimits = field(default_factory=TransformLimits)
    tau: float = 0.6
    ransac: RansacParams = field(default_factory=RansacParams)
    min_correspondences: int = 8
    min_overlap_fraction: float = 0.1
    realign: bool = True

    def __post_init__(self):
        if abs(self.w1 + self.w2 - 1) > 1e-9 or abs(self.w3 + self.w4 - 1) > 1e-9:
            raise MatchError("fusion weights must sum to 1 (w1 + w2, w3 + w4)")
        # bands outside [-1, 1] are allowed: they simply never (or always) trigger
        if self.s_l > self.s_h:
            raise MatchError("need s_l <= s_h")

    @classmethod
    def with_weights(cls, w1: float = 0.2, w3: float = 0.5, **kw) -> "MatchParams":
        return cls(w1=w1, w2=1 - w1, w3=w3, w4=1 - w3, **kw)


@dataclass
class Features:
    """Everything the matcher needs from one image."""

    img: np.ndarray  # model-input-sized uint8 image the features were computed on
    z_c: np.ndarray
    z_a: np.ndarray
    descriptors: Optional[np.ndarray] = None  # (grid^2, local_dim), unit rows
    keypoints: Optional[np.ndarray] = None  # (grid^2, 2) in img coordinates
    fg: Optional[np.ndarray] = None


@dataclass
class MatchResult:
    score: float
    original_score: float
    realign_attempted: bool = False
    realign_applied: bool = False
    transform: Optional[AffineTransform] = None
    n_correspondences: int = 0
    refined_score: Optional[float] = None
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "score": self.score, "original_score": self.original_score,
            "realign_attempted": self.realign_attempted, "realign_applied": self.realign_applied,
            "transform": None if self.transform is None else self.transform.m.tolist(),
            "n_correspondences": self.n_correspondences, "refined_score": self.refined_score,
            "reason": self.reason,
        }


def _fit_to(img: np.ndarray, size: int) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3:
        img = np.rint(img[..., :3] @ np.array([0.299, 0.587, 0.114])).astype(np.uint8)
    if img.shape == (size, size):
        return img.astype(np.uint8)
    from PIL import Image

    h, w = img.shape
    k = size / max(h, w)
    nh, nw = max(1, round(h * k)), max(1, round(w * k))
    small = np.asarray(Image.fromarray(img.astype(np.uint8)).resize((nw, nh), Image.BILINEAR))
    canvas = np.full((size, size), BACKGROUND, dtype=np.uint8)
    y0, x0 = (size - nh) // 2, (size - nw) // 2
    canvas[y0:y0 + nh, x0:x0 + nw] = small
    return canvas


class AFRNetExtractor:
    """Turns images into :class:`Features` with a frozen model.

    Safe to share between threads; forward passes run under ``no_grad`` in
    eval mode.
    """

    def __init__(self, model: AFRNet):
        self.model = model.eval()
        self.cfg: ModelConfig = model.cfg
        self.fingerprint = self.cfg.fingerprint()
        s, g, p = self.cfg.input_size, self.cfg.grid, self.cfg.patch
        self._centers = patch_centers(g, g, p)
        self._centers_norm = np.hstack([self._centers * 2.0 / s - 1.0, np.ones((g * g, 1))])

    def fit(self, img: np.ndarray) -> np.ndarray:
        return _fit_to(img, self.cfg.input_size)

    @torch.no_grad()
    def extract(self, img: np.ndarray, with_locals: bool = True) -> Features:
        img = self.fit(img)
        out = self.model(preprocess(img, self.cfg.input_size).unsqueeze(0))
        z_c = out.z_c[0].double().numpy()
        z_a = out.z_a[0].double().numpy()
        if not with_locals:
            return Features(img, z_c, z_a)
        desc = out.local[0].reshape(-1, out.local.shape[-1]).numpy().astype(np.float32)
        # Cells live in the aligned frame; map their centers back through the STN.
        theta = similarity_theta(out.align)[0].double().numpy()
        src_norm = self._centers_norm @ theta.T
        kp = (src_norm + 1.0) * self.cfg.input_size / 2.0
        return Features(img, z_c, z_a, desc, kp, foreground_mask(img))


def _check_unit(*vs):
    for v in vs:
        if abs(np.linalg.norm(v) - 1.0) > 1e-4:
            raise MatchError("embeddings must be unit norm")


def global_score(e1, e2, w1: float = 0.2, w2: float = 0.8) -> float:
    """``w1 * <z_c1, z_c2> + w2 * <z_a1, z_a2>`` for anything with ``z_c``/``z_a``."""
    a1, b1 = np.asarray(e1.z_c, dtype=np.float64), np.asarray(e1.z_a, dtype=np.float64)
    a2, b2 = np.asarray(e2.z_c, dtype=np.float64), np.asarray(e2.z_a, dtype=np.float64)
    if a1.shape != a2.shape or b1.shape != b2.shape:
        raise MatchError("embedding dimension mismatch")
    _check_unit(a1, b1, a2, b2)
    # float32 roundoff can push a self-match a hair past 1
    return float(np.clip(w1 * np.dot(a1, a2) + w2 * np.dot(b1, b2), -1.0, 1.0))


def in_band(s: float, p: MatchParams) -> bool:
    return p.s_l <= s <= p.s_h


def _fallback(s: float, reason: str, **kw) -> MatchResult:
    return MatchResult(score=s, original_score=s, realign_attempted=True, reason=reason, **kw)


def _estimate(f1: Features, desc2, kp2, p: MatchParams):
    corr = match_descriptors(f1.descriptors, desc2, p.tau)
    if len(corr) < p.min_correspondences:
        return None, len(corr), "too few correspondences"
    t = estimate_affine(corr, f1.keypoints, kp2, p.ransac)
    if t is None:
        return None, len(corr), "no affine consensus"
    if not transform_ok(t, p.limits):
        return None, len(corr), "transform outside limits"
    return t, len(corr), ""


def match_features(f1: Features, f2: Features, extractor, p: MatchParams = MatchParams()) -> MatchResult:
    s = global_score(f1, f2, p.w1, p.w2)
    if not p.realign or not in_band(s, p):
        return MatchResult(score=s, original_score=s)
    if f1.descriptors is None or f2.descriptors is None:
        return _fallback(s, "no local descriptors")
    t, n_corr, why = _estimate(f1, f2.descriptors, f2.keypoints, p)
    if t is None:
        return _fallback(s, why, n_correspondences=n_corr)
    warped = warp_image(f1.img, t, fill=BACKGROUND)
    crops = overlap_masks(warped, f2.img, warp_mask(f1.fg, t), f2.fg,
                          fill=BACKGROUND, min_overlap_fraction=p.min_overlap_fraction)
    if crops is None:
        return _fallback(s, "no overlap", transform=t, n_correspondences=n_corr)
    e1 = extractor.extract(crops[0], with_locals=False)
    e2 = extractor.extract(crops[1], with_locals=False)
    refined = global_score(e1, e2, p.w1, p.w2)
    fused = p.w3 * s + p.w4 * refined
    return MatchResult(score=fused, original_score=s, realign_attempted=True, realign_applied=True,
                       transform=t, n_correspondences=n_corr, refined_score=refined)


def match(img1: np.ndarray, img2: np.ndarray, extractor, p: MatchParams = MatchParams()) -> MatchResult:
    return match_features(extractor.extract(img1), extractor.extract(img2), extractor, p)


@dataclass
class Verification:
    accept: bool
    threshold: float
    result: MatchResult


DEFAULT_THRESHOLD = 0.36


def decide(score: float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    if not (-1 <= threshold <= 1):
        raise MatchError("threshold must be in [-1, 1]")
    return score >= threshold


def verify(img1, img2, extractor, p: MatchParams = MatchParams(),
           threshold: float = DEFAULT_THRESHOLD) -> Verification:
    decide(0.0, threshold)
    r = match(img1, img2, extractor, p)
    return Verification(decide(r.score, threshold), threshold, r)


# ---------------------------------------------------------------------------
# Templates and 1:N search


@dataclass
class Template:
    subject: str
    finger: str
    z_c: np.ndarray
    z_a: np.ndarray
    model_fingerprint: str
    descriptors: Optional[np.ndarray] = None
    keypoints: Optional[np.ndarray] = None
    fg: Optional[np.ndarray] = None

    @property
    def label(self) -> str:
        return f"{self.subject}/{self.finger}" if self.finger else self.subject

    @property
    def has_locals(self) -> bool:
        return self.descriptors is not None

    def __eq__(self, other):
        if not isinstance(other, Template):
            return NotImplemented
        arrays = ("z_c", "z_a", "descriptors", "keypoints", "fg")

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return ((self.subject, self.finger, self.model_fingerprint)
                == (other.subject, other.finger, other.model_fingerprint)
                and all(same(getattr(self, k), getattr(other, k)) for k in arrays))


def enroll(img: np.ndarray, extractor, subject: str, finger: str = "",
           with_locals: bool = True) -> Template:
    f = extractor.extract(img, with_locals=with_locals)
    return template_from_features(f, extractor.fingerprint, subject, finger, with_locals)


def template_from_features(f: Features, fingerprint: str, subject: str, finger: str = "",
                           with_locals: bool = True) -> Template:
    # float32 is the storage precision; keep the in-memory template identical to the file
    z = lambda v: np.asarray(v, dtype=np.float32)
    t = Template(subject, finger, z(f.z_c), z(f.z_a), fingerprint)
    if with_locals and f.descriptors is not None:
        t.descriptors = np.asarray(f.descriptors, dtype=np.float32)
        t.keypoints = np.asarray(f.keypoints, dtype=np.float32)
        t.fg = f.fg.copy()
    return t


def score_template(probe: Features, t: Template, extractor, p: MatchParams) -> MatchResult:
    """Score one gallery template; realignment warps only the probe.

    Without the gallery image, the refined score compares the re-embedded
    masked probe against the stored gallery embeddings.
    """
    s = global_score(probe, t, p.w1, p.w2)
    if not p.realign or not in_band(s, p):
        return MatchResult(score=s, original_score=s)
    if not t.has_locals or probe.descriptors is None:
        return _fallback(s, "no local descriptors")
    tr, n_corr, why = _estimate(probe, t.descriptors, t.keypoints.astype(np.float64), p)
    if tr is None:
        return _fallback(s, why, n_correspondences=n_corr)
    warped = warp_image(probe.img, tr, fill=BACKGROUND)
    crops = overlap_masks(warped, warped, warp_mask(probe.fg, tr), t.fg,
                          fill=BACKGROUND, min_overlap_fraction=p.min_overlap_fraction)
    if crops is None:
        return _fallback(s, "no overlap", transform=tr, n_correspondences=n_corr)
    e1 = extractor.extract(crops[0], with_locals=False)
    refined = global_score(e1, t, p.w1, p.w2)
    return MatchResult(score=p.w3 * s + p.w4 * refined, original_score=s, realign_attempted=True,
                       realign_applied=True, transform=tr, n_correspondences=n_corr,
                       refined_score=refined)


@dataclass
class Candidate:
    index: int  # enrollment order
    label: str
    score: float
    result: MatchResult


def search(probe, gallery: Sequence[Template], extractor, p: MatchParams = MatchParams(),
           k: int = 10, executor: Optional[Executor] = None) -> list[Candidate]:
    """Top-``k`` gallery entries by final score; ties keep enrollment order."""
    if not gallery:
        raise MatchError("empty gallery")
    bad = {t.model_fingerprint for t in gallery} - {extractor.fingerprint}
    if bad:
        raise MatchError(f"gallery built with a different model ({sorted(bad)})")
    f = probe if isinstance(probe, Features) else extractor.extract(probe)
    fn = lambda t: score_template(f, t, extractor, p)
    results = list(executor.map(fn, gallery)) if executor is not None else [fn(t) for t in gallery]
    order = sorted(range(len(gallery)), key=lambda i: (-results[i].score, i))
    return [Candidate(i, gallery[i].label, results[i].score, results[i]) for i in order[:k]]
