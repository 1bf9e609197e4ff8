"""Verification / identification metrics, evaluation protocols and experiment drivers.

Acceptance convention everywhere: a comparison is accepted when
``score >= threshold``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.imposter = np.asarray(self.imposter, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.imposter))):
            raise EvaluationError("scores must be finite")

    def require_nonempty(self):
        if len(self.genuine) == 0 or len(self.imposter) == 0:
            raise EvaluationError("need both genuine and imposter scores")


# ---------------------------------------------------------------------------
# Protocols


def fvc_pairs(n_fingers: int, n_impressions: int):
    """FVC pairing: all impression pairs within each finger; first impressions across fingers.

    Items are ``(finger, impression)`` tuples.
    """
    if n_fingers < 2 or n_impressions < 2:
        raise EvaluationError("need at least 2 fingers and 2 impressions")
    genuine = [((f, i), (f, j)) for f in range(n_fingers)
               for i, j in combinations(range(n_impressions), 2)]
    imposter = [((f, 0), (g, 0)) for f, g in combinations(range(n_fingers), 2)]
    return genuine, imposter


def full_pairs(n_fingers: int, n_impressions: int):
    """Every genuine and every imposter pair."""
    items = [(f, i) for f in range(n_fingers) for i in range(n_impressions)]
    genuine, imposter = [], []
    for a, b in combinations(items, 2):
        (genuine if a[0] == b[0] else imposter).append((a, b))
    return genuine, imposter


# ---------------------------------------------------------------------------
# ROC / TAR@FAR / CMC


class ROCPoint(NamedTuple):
    far: float
    tar: float
    threshold: float


def _rates(scores: ScoreSet, thresholds: np.ndarray):
    g = np.sort(scores.genuine)
    i = np.sort(scores.imposter)
    tar = (len(g) - np.searchsorted(g, thresholds, side="left")) / len(g)
    far = (len(i) - np.searchsorted(i, thresholds, side="left")) / len(i)
    return far, tar


def roc(scores: ScoreSet) -> list[ROCPoint]:
    scores.require_nonempty()
    t = np.unique(np.concatenate([scores.genuine, scores.imposter]))
    far, tar = _rates(scores, t)
    order = np.lexsort((tar, far))
    return [ROCPoint(float(far[k]), float(tar[k]), float(t[k])) for k in order]


class OperatingPoint(NamedTuple):
    tar: float
    threshold: float
    far: float
    low_resolution: bool  # fewer than 1/far_target imposter scores


def tar_at_far(scores: ScoreSet, far_target: float) -> OperatingPoint:
    """Lowest threshold whose FAR does not exceed ``far_target``, and its TAR."""
    scores.require_nonempty()
    if not (0 < far_target < 1):
        raise EvaluationError("far_target must be in (0, 1)")
    low_res = len(scores.imposter) < 1.0 / far_target - 1e-9
    if low_res:
        warnings.warn(f"only {len(scores.imposter)} imposter scores; FAR={far_target} is not resolvable",
                      stacklevel=2)
    top = np.nextafter(max(scores.genuine.max(), scores.imposter.max()), np.inf)
    t = np.append(np.unique(np.concatenate([scores.genuine, scores.imposter])), top)
    far, tar = _rates(scores, t)
    k = int(np.flatnonzero(far <= far_target + 1e-12)[0])
    return OperatingPoint(float(tar[k]), float(t[k]), float(far[k]), low_res)


def mate_ranks(ranked_labels: Sequence[Sequence], mates: Sequence) -> np.ndarray:
    ranks = []
    for labels, mate in zip(ranked_labels, mates, strict=True):
        labels = list(labels)
        if mate not in labels:
            raise EvaluationError(f"probe mate {mate!r} missing from its results (closed set)")
        ranks.append(labels.index(mate) + 1)
    return np.asarray(ranks)


def cmc(ranked_labels: Sequence[Sequence], mates: Sequence, max_rank: Optional[int] = None) -> list[float]:
    """Rank-k identification accuracy for k = 1..max_rank."""
    ranks = mate_ranks(ranked_labels, mates)
    if max_rank is None:
        max_rank = max(len(r) for r in ranked_labels)
    return [float(np.mean(ranks <= k)) for k in range(1, max_rank + 1)]


# ---------------------------------------------------------------------------
# Latency


@dataclass(frozen=True)
class LatencyModel:
    t_inference: float  # ms per embedding
    t_realign: float  # ms of realignment overhead
    rate: float  # fraction of comparisons realigned

    def __post_init__(self):
        if self.t_inference < 0 or self.t_realign < 0:
            raise EvaluationError("times must be non-negative")
        if not (0 <= self.rate <= 1):
            raise EvaluationError("rate must be in [0, 1]")


def amortized_latency(lm: LatencyModel) -> float:
    r = lm.rate
    return r * (lm.t_realign + 2 * lm.t_inference) + (1 - r) * lm.t_inference


def realign_rate(results: Iterable) -> float:
    results = list(results)
    if not results:
        raise EvaluationError("no match results")
    return sum(bool(r.realign_attempted) for r in results) / len(results)


def measure_realign_rate(pairs: Sequence, extractor, params) -> float:
    """Fraction of ``(img1, img2)`` pairs for which realignment is attempted."""
    from .matcher import match

    if not pairs:
        raise EvaluationError("empty pair list")
    return realign_rate(match(a, b, extractor, params) for a, b in pairs)


# ---------------------------------------------------------------------------
# Saliency and robustness


def modal_background(img: np.ndarray) -> int:
    counts = np.bincount(np.asarray(img, dtype=np.uint8).ravel(), minlength=256)
    return int(np.argmax(counts))


def occlude_patch(img: np.ndarray, i: int, j: int, patch: int = 16, value: Optional[int] = None) -> np.ndarray:
    out = np.array(img, copy=True)
    out[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch] = modal_background(img) if value is None else value
    return out


def saliency_map(img1: np.ndarray, img2: np.ndarray, extractor, params, patch: int = 16,
                 executor=None):
    """Per-patch match score with one 16x16 patch of each image replaced by background.

    Returns ``(map1, map2)``: ``map1[i, j]`` scores ``img1`` occluded at cell
    ``(i, j)`` against intact ``img2``, and symmetrically for ``map2``.
    """
    from .matcher import match_features

    f1 = extractor.extract(img1)
    f2 = extractor.extract(img2)
    s = f1.img.shape[0]
    g = s // patch
    cells = [(i, j) for i in range(g) for j in range(g)]

    def one(which, cell):
        if which == 0:
            occ = extractor.extract(occlude_patch(f1.img, *cell, patch))
            return match_features(occ, f2, extractor, params).score
        occ = extractor.extract(occlude_patch(f2.img, *cell, patch))
        return match_features(f1, occ, extractor, params).score

    jobs = [(w, c) for w in (0, 1) for c in cells]
    if executor is None:
        vals = [one(*jb) for jb in jobs]
    else:
        vals = list(executor.map(lambda jb: one(*jb), jobs))
    maps = np.asarray(vals, dtype=np.float64).reshape(2, g, g)
    return maps[0], maps[1]


@dataclass(frozen=True)
class RobustnessRow:
    ratio: float
    mean_tar: float
    std_tar: float
    runs: tuple


def robustness_sweep(genuine_pairs: Sequence, imposter_pairs: Sequence, extractor, params,
                     ratios: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5), repeats: int = 5,
                     rng_seed: int = 0, mode: str = "occlusion", far: float = 1e-3,
                     executor=None) -> list[RobustnessRow]:
    """TAR@FAR with the first image of every pair perturbed at each ratio.

    Pairs hold raw images ``(img1, img2)``; ``mode`` is ``"occlusion"`` or
    ``"affine"`` (partial affine crop).
    """
    from .geometry import random_occlusion, random_partial_affine
    from .matcher import match_features

    if not ratios or repeats < 1:
        raise EvaluationError("need ratios and repeats >= 1")
    perturb = {"occlusion": random_occlusion, "affine": random_partial_affine}.get(mode)
    if perturb is None:
        raise EvaluationError(f"unknown mode {mode!r}")
    mapper = map if executor is None else executor.map

    cache: dict = {}

    def feats(img):
        key = id(img)
        if key not in cache:
            cache[key] = (img, extractor.extract(img))
        return cache[key][1]

    rows = []
    for ri, ratio in enumerate(ratios):
        runs = []
        for rep in range(repeats):
            def score(job):
                k, (a, b) = job
                seed = int(np.random.default_rng([rng_seed, ri, rep, k]).integers(0, 2 ** 31))
                pa = perturb(a, ratio, seed) if ratio > 0 else a
                fa = extractor.extract(pa) if ratio > 0 else feats(a)
                return match_features(fa, feats(b), extractor, params).score

            gen = list(mapper(score, enumerate(genuine_pairs)))
            imp = list(mapper(score, enumerate(imposter_pairs, start=len(genuine_pairs))))
            runs.append(tar_at_far(ScoreSet(gen, imp), far).tar)
        rows.append(RobustnessRow(float(ratio), float(np.mean(runs)), float(np.std(runs)), tuple(runs)))
    return rows


# ---------------------------------------------------------------------------
# Export


def histogram_rows(stages: dict, bins: int = 50, lo: float = -1.0, hi: float = 1.0):
    """Rows ``(stage, bin_lo, bin_hi, genuine_count, imposter_count)``.

    ``stages`` maps a stage name (original / refined / fused) to a ScoreSet.
    """
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for name, s in stages.items():
        g, _ = np.histogram(np.clip(s.genuine, lo, hi), edges)
        i, _ = np.histogram(np.clip(s.imposter, lo, hi), edges)
        for k in range(bins):
            rows.append((name, float(edges[k]), float(edges[k + 1]), int(g[k]), int(i[k])))
    return rows


def export_distributions(stages: dict, bins: int = 50, path=None) -> str:
    for s in stages.values():
        if len(s.genuine) + len(s.imposter) == 0:
            raise EvaluationError("empty score set")
    text = rows_to_csv(["stage", "bin_lo", "bin_hi", "genuine", "imposter"], histogram_rows(stages, bins))
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def rows_to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()
