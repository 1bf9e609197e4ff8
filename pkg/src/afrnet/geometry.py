"""Keypoints, descriptor correspondence, robust affine fitting and image warping.

Coordinates are continuous pixel coordinates with the origin at the top-left
corner of the image: pixel ``(row i, col j)`` covers ``[j, j+1) x [i, i+1)`` and
its center sits at ``(j + 0.5, i + 0.5)``.  Point arrays are ``(n, 2)`` with
columns ``(x, y)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

BACKGROUND = 255


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float


def patch_centers(grid_h: int, grid_w: int, patch: int) -> np.ndarray:
    """Centers of a ``grid_h x grid_w`` tiling of ``patch``-sized cells, row-major."""
    if min(grid_h, grid_w, patch) < 1:
        raise GeometryError("grid and patch sizes must be >= 1")
    ii, jj = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    xs = jj.ravel() * patch + patch / 2.0
    ys = ii.ravel() * patch + patch / 2.0
    return np.stack([xs, ys], axis=1).astype(np.float64)


@dataclass
class DescriptorSet:
    descriptors: np.ndarray  # (n, D), unit rows
    keypoints: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        if len(self.descriptors) != len(self.keypoints):
            raise GeometryError("descriptor / keypoint count mismatch")
        norms = np.linalg.norm(self.descriptors.astype(np.float64), axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > 1e-5:
            raise GeometryError("descriptors must be unit L2 norm")

    def __len__(self) -> int:
        return len(self.descriptors)


class Correspondence(NamedTuple):
    idx_a: int
    idx_b: int
    similarity: float


def match_descriptors(a: np.ndarray, b: np.ndarray, threshold: float = 0.6) -> list[Correspondence]:
    """Mutual nearest neighbours under cosine similarity with a minimum similarity.

    ``a`` and ``b`` are ``(n, D)`` / ``(m, D)`` unit-row arrays (or
    :class:`DescriptorSet`).  The result is a 1:1 pairing sorted by descending
    similarity, ties by ``idx_a``.
    """
    a = a.descriptors if isinstance(a, DescriptorSet) else np.asarray(a)
    b = b.descriptors if isinstance(b, DescriptorSet) else np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise GeometryError(f"descriptor dimension mismatch: {a.shape} vs {b.shape}")
    if len(a) == 0 or len(b) == 0:
        return []
    sim = a.astype(np.float64) @ b.astype(np.float64).T
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)
    ids = np.arange(len(a))
    best = sim[ids, nn_ab]
    keep = (nn_ba[nn_ab] == ids) & (best >= threshold)
    out = [Correspondence(int(i), int(nn_ab[i]), float(best[i])) for i in ids[keep]]
    out.sort(key=lambda c: (-c.similarity, c.idx_a))
    return out


# ---------------------------------------------------------------------------
# Affine transforms


def _rot(deg: float) -> np.ndarray:
    r = math.radians(deg)
    return np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])


def decompose(m: np.ndarray) -> tuple[float, float, float, float, float, float]:
    """Split ``m = [R(rot) @ [[sx, shear], [0, sy]] | t]``.

    Returns ``(scale_x, scale_y, rotation_deg, shear, tx, ty)``.  A reflection
    shows up as a negative ``scale_y``.
    """
    m = np.asarray(m, dtype=np.float64)
    a = m[:, :2]
    if abs(np.linalg.det(a)) < 1e-12:
        raise GeometryError("singular linear part")
    sx = math.hypot(a[0, 0], a[1, 0])
    rot = math.degrees(math.atan2(a[1, 0], a[0, 0]))
    u = _rot(-rot) @ a
    return sx, float(u[1, 1]), rot, float(u[0, 1]), float(m[0, 2]), float(m[1, 2])


def recompose(scale_x: float, scale_y: float, rotation_deg: float, shear: float,
              tx: float, ty: float) -> np.ndarray:
    a = _rot(rotation_deg) @ np.array([[scale_x, shear], [0.0, scale_y]])
    return np.hstack([a, [[tx], [ty]]])


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping source (probe) coordinates into target (reference) coordinates."""

    m: np.ndarray = field(default_factory=lambda: np.eye(2, 3))

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64).reshape(2, 3))

    def __eq__(self, other):
        if not isinstance(other, AffineTransform):
            return NotImplemented
        return bool(np.array_equal(self.m, other.m))

    def __hash__(self):
        return hash(self.m.tobytes())

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(2, 3))

    @classmethod
    def from_params(cls, scale: float = 1.0, rotation: float = 0.0, tx: float = 0.0,
                    ty: float = 0.0, center: Optional[Sequence[float]] = None,
                    scale_y: Optional[float] = None, shear: float = 0.0) -> "AffineTransform":
        """Scale/rotate (degrees) about ``center`` (default origin), then translate."""
        a = recompose(scale, scale if scale_y is None else scale_y, rotation, shear, 0, 0)[:, :2]
        c = np.zeros(2) if center is None else np.asarray(center, dtype=np.float64)
        t = c - a @ c + np.array([tx, ty])
        return cls(np.hstack([a, t[:, None]]))

    @property
    def params(self):
        return decompose(self.m)

    @property
    def scale_x(self) -> float:
        return self.params[0]

    @property
    def scale_y(self) -> float:
        return self.params[1]

    @property
    def rotation(self) -> float:
        return self.params[2]

    @property
    def tx(self) -> float:
        return float(self.m[0, 2])

    @property
    def ty(self) -> float:
        return float(self.m[1, 2])

    @property
    def invertible(self) -> bool:
        return abs(np.linalg.det(self.m[:, :2])) > 1e-12

    def as3x3(self) -> np.ndarray:
        return np.vstack([self.m, [0.0, 0.0, 1.0]])

    def inverse(self) -> "AffineTransform":
        if not self.invertible:
            raise GeometryError("transform is not invertible")
        return AffineTransform(np.linalg.inv(self.as3x3())[:2])

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """``self o other``: apply ``other`` first."""
        return AffineTransform((self.as3x3() @ other.as3x3())[:2])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return pts @ self.m[:, :2].T + self.m[:, 2]


@dataclass(frozen=True)
class TransformLimits:
    scale_min: float = 0.5
    scale_max: float = 2.0
    max_rotation: float = 60.0
    max_translation: float = 112.0

    def __post_init__(self):
        if not (0 < self.scale_min <= 1 <= self.scale_max):
            raise GeometryError("need 0 < scale_min <= 1 <= scale_max")
        if not (0 < self.max_rotation <= 180):
            raise GeometryError("max_rotation must be in (0, 180]")
        if self.max_translation <= 0:
            raise GeometryError("max_translation must be positive")


def transform_ok(t: AffineTransform, limits: TransformLimits = TransformLimits()) -> bool:
    try:
        sx, sy, rot, _, tx, ty = decompose(t.m)
    except GeometryError:
        return False
    return (limits.scale_min <= sx <= limits.scale_max
            and limits.scale_min <= sy <= limits.scale_max
            and abs(rot) <= limits.max_rotation
            and max(abs(tx), abs(ty)) <= limits.max_translation)


@dataclass(frozen=True)
class RansacParams:
    iters: int = 500
    inlier_px: float = 3.0
    min_inliers: int = 8


def fit_affine_lstsq(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares 2x3 affine taking ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    x = np.hstack([src, np.ones((len(src), 1))])
    sol, *_ = np.linalg.lstsq(x, dst, rcond=None)
    return sol.T


def _seed_from(*arrays: np.ndarray) -> int:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def ransac_affine(src: np.ndarray, dst: np.ndarray, params: RansacParams = RansacParams(),
                  rng_seed: Optional[int] = None):
    """RANSAC over 3-point samples followed by a least-squares refit on the consensus.

    Returns ``(m, inlier_mask)`` or ``None`` when no consensus of at least
    ``params.min_inliers`` points exists.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 3:
        return None
    seed = _seed_from(src, dst) if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    samples = np.argsort(rng.random((params.iters, n)), axis=1)[:, :3]

    xs = np.concatenate([src[samples], np.ones((params.iters, 3, 1))], axis=2)  # (k, 3, 3)
    ys = dst[samples]  # (k, 3, 2)
    dets = np.linalg.det(xs)
    ok = np.abs(dets) > 1e-6
    if not ok.any():
        return None
    xs, ys = xs[ok], ys[ok]
    models = np.linalg.solve(xs, ys)  # (k, 3, 2): [x y 1] @ models = dst
    src_h = np.hstack([src, np.ones((n, 1))])
    proj = np.einsum("nc,kcd->knd", src_h, models)
    err = np.linalg.norm(proj - dst[None], axis=2)
    inl = err < params.inlier_px
    counts = inl.sum(axis=1)
    cost = np.where(inl, err, params.inlier_px).sum(axis=1)
    best = np.lexsort((cost, -counts))[0]
    mask = inl[best]
    if mask.sum() < max(params.min_inliers, 3):
        return None
    m = fit_affine_lstsq(src[mask], dst[mask])
    if abs(np.linalg.det(m[:, :2])) < 1e-9:
        return None
    return m, mask


def estimate_affine(corr: Sequence[Correspondence], kp_a: np.ndarray, kp_b: np.ndarray,
                    ransac: RansacParams = RansacParams(),
                    rng_seed: Optional[int] = None) -> Optional[AffineTransform]:
    """Affine taking keypoints of set A onto their correspondents in set B, or ``None``."""
    if len(corr) < 3:
        return None
    kp_a = np.asarray(kp_a, dtype=np.float64).reshape(-1, 2)
    kp_b = np.asarray(kp_b, dtype=np.float64).reshape(-1, 2)
    ia = np.array([c.idx_a for c in corr])
    ib = np.array([c.idx_b for c in corr])
    fit = ransac_affine(kp_a[ia], kp_b[ib], ransac, rng_seed)
    if fit is None:
        return None
    return AffineTransform(fit[0])


# ---------------------------------------------------------------------------
# Warping and masking


def _sample_bilinear(img: np.ndarray, qx: np.ndarray, qy: np.ndarray, fill: float):
    """Bilinear lookup at continuous coordinates; out-of-range samples get ``fill``."""
    h, w = img.shape
    fx = qx - 0.5
    fy = qy - 0.5
    eps = 1e-9
    valid = (fx >= -eps) & (fx <= w - 1 + eps) & (fy >= -eps) & (fy <= h - 1 + eps)
    fx = np.clip(fx, 0, w - 1)
    fy = np.clip(fy, 0, h - 1)
    x0 = np.floor(fx).astype(np.intp)
    y0 = np.floor(fy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = fx - x0
    ay = fy - y0
    src = img.astype(np.float64)
    top = src[y0, x0] * (1 - ax) + src[y0, x1] * ax
    bot = src[y1, x0] * (1 - ax) + src[y1, x1] * ax
    val = top * (1 - ay) + bot * ay
    return np.where(valid, val, fill)


def warp_image(img: np.ndarray, t: AffineTransform, fill: float = BACKGROUND,
               out_shape: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Inverse-mapping bilinear warp: ``out(p) = img(t^-1 p)``."""
    img = np.asarray(img)
    if img.size == 0 or img.ndim != 2:
        raise GeometryError("expected a nonempty 2-D grayscale image")
    inv = t.inverse()
    h, w = out_shape or img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    q = inv.apply(pts)
    out = _sample_bilinear(img, q[:, 0], q[:, 1], fill).reshape(h, w)
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(img.dtype)
    return out.astype(img.dtype)


def warp_mask(mask: np.ndarray, t: AffineTransform) -> np.ndarray:
    return warp_image(np.asarray(mask, dtype=np.float32), t, fill=0.0) >= 0.5


def foreground_mask(img: np.ndarray, block: int = 16, std_threshold: float = 10.0) -> np.ndarray:
    """Blocks whose intensity std exceeds ``std_threshold`` (0-255 scale) are foreground."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    mask = np.zeros((h, w), dtype=bool)
    for i in range(0, h, block):
        for j in range(0, w, block):
            if img[i:i + block, j:j + block].std() > std_threshold:
                mask[i:i + block, j:j + block] = True
    return mask


def overlap_masks(img_a_warped: np.ndarray, img_b: np.ndarray, fg_a: np.ndarray,
                  fg_b: np.ndarray, fill: float = BACKGROUND,
                  min_overlap_fraction: float = 0.1):
    """Mask both images to the common foreground.

    ``fg_a`` must already be warped alongside ``img_a_warped``.  Returns
    ``(c1, c2)``, or ``None`` when the overlap is below
    ``min_overlap_fraction`` of either foreground.
    """
    shapes = {np.shape(img_a_warped), np.shape(img_b), np.shape(fg_a), np.shape(fg_b)}
    if len(shapes) != 1:
        raise GeometryError(f"dimension mismatch: {shapes}")
    fg_a = np.asarray(fg_a, dtype=bool)
    fg_b = np.asarray(fg_b, dtype=bool)
    overlap = fg_a & fg_b
    area = overlap.sum()
    if area == 0 or area < min_overlap_fraction * fg_a.sum() or area < min_overlap_fraction * fg_b.sum():
        return None
    c1 = np.where(overlap, img_a_warped, fill).astype(np.asarray(img_a_warped).dtype)
    c2 = np.where(overlap, img_b, fill).astype(np.asarray(img_b).dtype)
    return c1, c2


# ---------------------------------------------------------------------------
# Perturbations for robustness experiments


def _check_ratio(ratio: float):
    if not (0 <= ratio < 1):
        raise GeometryError("ratio must be in [0, 1)")


def random_occlusion(img: np.ndarray, ratio: float, rng_seed: int, fill: float = BACKGROUND,
                     tol: float = 0.02, fg: Optional[np.ndarray] = None) -> np.ndarray:
    """Paint background rectangles until ``ratio`` (+-``tol``) of the foreground is hidden."""
    _check_ratio(ratio)
    img = np.asarray(img)
    if ratio == 0:
        return img.copy()
    fg = _paintable(img, fg, fill)
    total = fg.sum()
    if total == 0:
        return img.copy()
    rng = np.random.default_rng(rng_seed)
    ys, xs = np.nonzero(fg)
    y_lo, y_hi, x_lo, x_hi = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    covered = np.zeros_like(fg)
    target = ratio * total
    for _ in range(100_000):
        deficit = target - covered[fg].sum()
        if abs(deficit) <= tol * total:
            break
        area = max(1.0, deficit * rng.uniform(0.3, 1.0))
        aspect = rng.uniform(0.5, 2.0)
        rh = int(max(1, min(y_hi - y_lo, round(math.sqrt(area * aspect)))))
        rw = int(max(1, min(x_hi - x_lo, round(area / rh))))
        y0 = int(rng.integers(y_lo, max(y_lo + 1, y_hi - rh + 1)))
        x0 = int(rng.integers(x_lo, max(x_lo + 1, x_hi - rw + 1)))
        trial = covered.copy()
        trial[y0:y0 + rh, x0:x0 + rw] = True
        if trial[fg].sum() - target <= tol * total:
            covered = trial
    else:
        raise GeometryError("occlusion did not converge")
    out = img.copy()
    out[covered] = fill
    return out


def random_partial_affine(img: np.ndarray, ratio: float, rng_seed: int, fill: float = BACKGROUND,
                          max_rotation: float = 15.0, max_shift: float = 16.0,
                          fg: Optional[np.ndarray] = None) -> np.ndarray:
    """Cut ``ratio`` of the foreground away through a random affine placement.

    The image is placed on a virtual canvas by a random rigid transform, the
    canvas keeps the half-plane that retains ``1 - ratio`` of the foreground,
    and the result is mapped back.  Mapping back is exact, so kept pixels are
    unchanged and only the cut region takes ``fill``.
    """
    _check_ratio(ratio)
    img = np.asarray(img)
    if ratio == 0:
        return img.copy()
    fg = _paintable(img, fg, fill)
    if fg.sum() == 0:
        return img.copy()
    rng = np.random.default_rng(rng_seed)
    h, w = img.shape
    place = AffineTransform.from_params(
        rotation=rng.uniform(-max_rotation, max_rotation),
        tx=rng.uniform(-max_shift, max_shift), ty=rng.uniform(-max_shift, max_shift),
        center=(w / 2, h / 2))
    direction = rng.uniform(0, 2 * math.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    pts = place.apply(np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1))
    proj = (pts[:, 0] * math.cos(direction) + pts[:, 1] * math.sin(direction)).reshape(h, w)
    cut_at = np.quantile(proj[fg], ratio)
    removed = proj < cut_at
    out = img.copy()
    out[removed] = fill
    return out


def occluded_fraction(before: np.ndarray, after: np.ndarray, fg: Optional[np.ndarray] = None,
                      fill: float = BACKGROUND) -> float:
    """Fraction of (non-background) foreground pixels that now hold ``fill``."""
    fg = _paintable(before, fg, fill)
    return float((fg & (np.asarray(after) == fill)).sum() / max(fg.sum(), 1))


def _paintable(img: np.ndarray, fg: Optional[np.ndarray], fill: float) -> np.ndarray:
    fg = foreground_mask(img) if fg is None else np.asarray(fg, dtype=bool)
    return fg & (np.asarray(img) != fill)
