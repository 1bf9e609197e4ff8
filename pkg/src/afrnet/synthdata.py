"""Procedural fingerprint-like identities and impressions.

A finger is a smooth ridge phase field: a whorl/arch blend around a core, a
few low-order harmonic bends and a set of spiral phase singularities that act
as ridge endings / bifurcations.  Impressions re-sample that field through an
affine placement, then add occlusion, sensor noise and contrast changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (BACKGROUND, AffineTransform, TransformLimits, random_occlusion,
                       transform_ok)

IMAGE_SIZE = 224
FREQ_RANGE = (0.08, 0.14)


@dataclass(frozen=True)
class SyntheticIdentity:
    seed: int
    ridge_frequency: float
    core: tuple[float, float]
    tilt: float  # radians, pattern axis
    whorl: float  # 0 = arch, 1 = whorl blend weight
    ellipticity: float
    bend: float
    harmonics: tuple  # ((amp_px, kx, ky, phase), ...)
    minutiae: tuple  # ((x, y, +-1), ...)
    silhouette: tuple  # (cx, cy, ax, ay, angle_rad)

    def phase(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Ridge phase in pixels; ridges sit where ``f * phase`` is an integer."""
        cx, cy = self.core
        c, s = math.cos(self.tilt), math.sin(self.tilt)
        u = (x - cx) * c + (y - cy) * s
        v = -(x - cx) * s + (y - cy) * c
        radial = np.sqrt(u * u + (self.ellipticity * v) ** 2 + 1.0)
        arch = v + self.bend * u * u / 100.0
        phi = self.whorl * radial + (1 - self.whorl) * arch
        for amp, kx, ky, ph in self.harmonics:
            phi = phi + amp * np.sin(kx * x + ky * y + ph)
        for mx, my, sign in self.minutiae:
            phi = phi + sign * np.arctan2(y - my, x - mx) / (2 * math.pi * self.ridge_frequency)
        return phi

    def orientation(self, x: np.ndarray, y: np.ndarray, h: float = 0.5) -> np.ndarray:
        """Ridge orientation in radians, modulo pi."""
        gx = (self.phase(x + h, y) - self.phase(x - h, y)) / (2 * h)
        gy = (self.phase(x, y + h) - self.phase(x, y - h)) / (2 * h)
        return np.mod(np.arctan2(gy, gx) + math.pi / 2, math.pi)

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        cx, cy, ax, ay, ang = self.silhouette
        c, s = math.cos(ang), math.sin(ang)
        u = ((x - cx) * c + (y - cy) * s) / ax
        v = (-(x - cx) * s + (y - cy) * c) / ay
        return u * u + v * v <= 1.0


def gen_identity(seed: int, size: int = IMAGE_SIZE) -> SyntheticIdentity:
    rng = np.random.default_rng([int(seed) & (2 ** 64 - 1), 0xF1])
    mid = size / 2
    freq = float(np.clip(rng.uniform(*FREQ_RANGE), *FREQ_RANGE))
    core = (mid + rng.uniform(-25, 25), mid + rng.uniform(-30, 20))
    harmonics = tuple(
        (rng.uniform(2.0, 7.0), rng.normal(0, 0.03), rng.normal(0, 0.03), rng.uniform(0, 2 * math.pi))
        for _ in range(3))
    n_min = int(rng.integers(10, 18))
    minutiae = tuple(
        (rng.uniform(mid - 70, mid + 70), rng.uniform(mid - 85, mid + 85), float(rng.choice([-1, 1])))
        for _ in range(n_min))
    silhouette = (mid + rng.uniform(-18, 18), mid + rng.uniform(-14, 14), rng.uniform(50, 86),
                  rng.uniform(70, 106), math.radians(rng.uniform(-20, 20)))
    # Pure whorls, or arches with a weak radial component; mixing the two
    # evenly lets the phase gradients cancel into blobs.
    if rng.random() < 0.4:
        whorl, ellipticity = 1.0, float(rng.uniform(0.6, 1.4))
    else:
        whorl, ellipticity = float(rng.uniform(0, 0.25)), float(rng.uniform(0.6, 1.0))
    return SyntheticIdentity(
        seed=int(seed), ridge_frequency=freq, core=core,
        tilt=rng.uniform(-math.pi / 4, math.pi / 4), whorl=whorl,
        ellipticity=ellipticity, bend=float(rng.uniform(-0.6, 0.6)),
        harmonics=harmonics, minutiae=minutiae, silhouette=silhouette)


@dataclass(frozen=True)
class Perturbation:
    affine: AffineTransform = field(default_factory=AffineTransform.identity)
    occlusion_ratio: float = 0.0
    noise_std: float = 0.0
    contrast: tuple[float, float] = (1.0, 0.0)  # gain, bias
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.occlusion_ratio < 1):
            raise ValueError("occlusion_ratio must be in [0, 1)")
        if not transform_ok(self.affine, TransformLimits()):
            raise ValueError("affine outside default transform limits")

    def to_dict(self) -> dict:
        return {"affine": [[float(v) for v in row] for row in self.affine.m],
                "occlusion_ratio": self.occlusion_ratio, "noise_std": self.noise_std,
                "contrast": list(self.contrast), "seed": self.seed}


def random_perturbation(rng: np.random.Generator, size: int = IMAGE_SIZE, max_rotation: float = 15.0,
                        max_shift: float = 12.0, occlusion_prob: float = 0.3) -> Perturbation:
    affine = AffineTransform.from_params(
        scale=rng.uniform(0.95, 1.05), rotation=rng.uniform(-max_rotation, max_rotation),
        tx=rng.uniform(-max_shift, max_shift), ty=rng.uniform(-max_shift, max_shift),
        center=(size / 2, size / 2))
    occ = float(rng.uniform(0.02, 0.15)) if rng.random() < occlusion_prob else 0.0
    return Perturbation(affine=affine, occlusion_ratio=occ, noise_std=float(rng.uniform(0, 12)),
                        contrast=(float(rng.uniform(0.8, 1.15)), float(rng.uniform(-15, 15))),
                        seed=int(rng.integers(0, 2 ** 31)))


def render_impression(ident: SyntheticIdentity, p: Perturbation = Perturbation(),
                      size: int = IMAGE_SIZE) -> np.ndarray:
    """Render an 8-bit impression; ``p.affine`` maps canonical to impression pixels."""
    ys, xs = np.mgrid[0:size, 0:size]
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    q = p.affine.inverse().apply(pts)
    qx, qy = q[:, 0].reshape(size, size), q[:, 1].reshape(size, size)
    ridge = np.cos(2 * math.pi * ident.ridge_frequency * ident.phase(qx, qy))
    ridge = np.tanh(2.5 * ridge) / math.tanh(2.5)
    inside = ident.inside(qx, qy)
    gain, bias = p.contrast
    fg_val = 128.0 - 95.0 * ridge
    fg_val = gain * (fg_val - 128.0) + 128.0 + bias
    if p.noise_std > 0:
        noise_rng = np.random.default_rng([p.seed, 1])
        fg_val = fg_val + noise_rng.normal(0, p.noise_std, fg_val.shape)
    img = np.where(inside, np.clip(np.rint(fg_val), 0, 254), BACKGROUND).astype(np.uint8)
    if p.occlusion_ratio > 0:
        img = random_occlusion(img, p.occlusion_ratio, rng_seed=p.seed)
    return img


def identity_seed(base_seed: int, index: int) -> int:
    return int(np.random.default_rng([base_seed, index, 7]).integers(0, 2 ** 63))


@dataclass(frozen=True)
class Sample:
    identity: int
    impression: int
    perturbation: Perturbation


def make_dataset(n_identities: int, n_impressions: int, seed: int = 0) -> list[Sample]:
    """Perturbation records for an identities x impressions dataset, identity-major."""
    out = []
    for i in range(n_identities):
        rng = np.random.default_rng([seed, i, 11])
        for k in range(n_impressions):
            out.append(Sample(i, k, random_perturbation(rng)))
    return out


def render_sample(s: Sample, seed: int = 0) -> np.ndarray:
    return render_impression(gen_identity(identity_seed(seed, s.identity)), s.perturbation)


def ridge_keypoints(img: np.ndarray, n: int = 300):
    """ORB keypoints and descriptors as ``(xy, unit_descriptors)``.

    Binary descriptors are mapped to +-1 vectors so cosine similarity equals
    ``1 - 2 * hamming / bits``.
    """
    from skimage.feature import ORB

    orb = ORB(n_keypoints=n, fast_threshold=0.05)
    orb.detect_and_extract(np.asarray(img, dtype=np.float64) / 255.0)
    xy = orb.keypoints[:, ::-1] + 0.5  # (row, col) -> continuous (x, y)
    d = orb.descriptors.astype(np.float32) * 2 - 1
    d /= np.sqrt(d.shape[1])
    return xy, d


# ---------------------------------------------------------------------------
# Training schedule


@dataclass(frozen=True)
class TrainConfig:
    identities: int = 50
    impressions_per_id: int = 8
    epochs: int = 30
    batch: int = 16
    lr0: float = 1e-4
    lr_min: float = 1e-5
    power: float = 3.0
    weight_decay: float = 2e-5
    seed: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if self.power <= 0:
            raise ValueError("power must be positive")


def poly_lr(step: int, total_steps: int, cfg: TrainConfig = TrainConfig()) -> float:
    if total_steps <= 0 or step >= total_steps:
        return cfg.lr_min
    frac = 1.0 - max(step, 0) / total_steps
    return cfg.lr_min + (cfg.lr0 - cfg.lr_min) * frac ** cfg.power
