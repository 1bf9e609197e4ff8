import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afrnet.geometry import (AffineTransform, Correspondence, DescriptorSet, GeometryError,
                             RansacParams, TransformLimits, decompose, estimate_affine,
                             fit_affine_lstsq, foreground_mask, match_descriptors,
                             occluded_fraction, overlap_masks, patch_centers, random_occlusion,
                             random_partial_affine, recompose, transform_ok, warp_image)
from afrnet.synthdata import gen_identity, render_impression


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def mnn_oracle(a, b, tau):
    """Plain double loop over all pairs."""
    out = []
    for i in range(len(a)):
        sims = [float(np.dot(a[i], b[j])) for j in range(len(b))]
        j = max(range(len(b)), key=lambda k: (sims[k], -k))
        back = [float(np.dot(a[k], b[j])) for k in range(len(a))]
        i_back = max(range(len(a)), key=lambda k: (back[k], -k))
        if i_back == i and sims[j] >= tau:
            out.append((i, j))
    return sorted(out)


def test_patch_centers():
    kp = patch_centers(14, 14, 16)
    assert kp.shape == (196, 2)
    assert tuple(kp[0]) == (8, 8)
    assert tuple(kp[1]) == (24, 8)  # row-major: x advances first
    assert tuple(kp[14]) == (8, 24)
    assert patch_centers(1, 1, 16).tolist() == [[8, 8]]
    with pytest.raises(GeometryError):
        patch_centers(0, 1, 16)


def test_descriptor_set_validates():
    rng = np.random.default_rng(0)
    DescriptorSet(unit_rows(rng, 5, 8), np.zeros((5, 2)))
    with pytest.raises(GeometryError):
        DescriptorSet(unit_rows(rng, 5, 8) * 2, np.zeros((5, 2)))
    with pytest.raises(GeometryError):
        DescriptorSet(unit_rows(rng, 5, 8), np.zeros((4, 2)))


def test_self_match_is_identity():
    a = unit_rows(np.random.default_rng(1), 50, 32)
    corr = match_descriptors(a, a, 0.6)
    assert sorted((c.idx_a, c.idx_b) for c in corr) == [(i, i) for i in range(50)]
    assert all(abs(c.similarity - 1.0) < 1e-12 for c in corr)


def test_permutation_recovered():
    rng = np.random.default_rng(2)
    a = unit_rows(rng, 196, 64)
    sim = a @ a.T
    assert sim[~np.eye(196, dtype=bool)].min() < 0.6
    perm = rng.permutation(196)
    b = a[perm]
    corr = match_descriptors(a, b, 0.6)
    assert len(corr) == 196
    for c in corr:
        assert perm[c.idx_b] == c.idx_a


def test_threshold_excludes_everything():
    rng = np.random.default_rng(3)
    a = unit_rows(rng, 20, 16)
    assert match_descriptors(a, -a, 0.6) == []


def test_dimension_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(GeometryError):
        match_descriptors(unit_rows(rng, 3, 4), unit_rows(rng, 3, 5))


def test_matches_sorted_and_one_to_one():
    rng = np.random.default_rng(5)
    a = unit_rows(rng, 60, 8)
    b = unit_rows(rng, 70, 8)
    corr = match_descriptors(a, b, 0.0)
    sims = [c.similarity for c in corr]
    assert sims == sorted(sims, reverse=True)
    assert len({c.idx_a for c in corr}) == len(corr) == len({c.idx_b for c in corr})


@pytest.mark.parametrize("seed", range(20))
def test_match_equals_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    a = unit_rows(rng, int(rng.integers(5, 40)), 6)
    b = unit_rows(rng, int(rng.integers(5, 40)), 6)
    got = sorted((c.idx_a, c.idx_b) for c in match_descriptors(a, b, 0.3))
    assert got == mnn_oracle(a, b, 0.3)


# ---------------------------------------------------------------------------


def planted_points(rng, n, m):
    src = rng.uniform(0, 224, size=(n, 2))
    return src, AffineTransform(m).apply(src)


def as_corr(n):
    return [Correspondence(i, i, 1.0) for i in range(n)]


def test_exact_translation_recovered():
    m_true = np.array([[1, 0, 10], [0, 1, -5]], dtype=float)
    src, dst = planted_points(np.random.default_rng(0), 30, m_true)
    oracle = np.linalg.lstsq(np.hstack([src, np.ones((30, 1))]), dst, rcond=None)[0].T
    t = estimate_affine(as_corr(30), src, dst)
    assert np.allclose(t.m, m_true, atol=1e-6)
    assert np.allclose(t.m, oracle, atol=1e-6)


def test_identity_correspondences():
    kp = patch_centers(14, 14, 16)
    t = estimate_affine(as_corr(196), kp, kp)
    assert np.allclose(t.m, np.eye(2, 3), atol=1e-9)


def test_planted_with_outliers():
    rng = np.random.default_rng(7)
    m_true = AffineTransform.from_params(scale=1.1, rotation=20, tx=4, ty=-7, center=(112, 112)).m
    n_in, n_out = 70, 30
    src, dst = planted_points(rng, n_in, m_true)
    src = np.vstack([src, rng.uniform(0, 224, (n_out, 2))])
    dst = np.vstack([dst, rng.uniform(0, 224, (n_out, 2))])
    t = estimate_affine(as_corr(100), src, dst, RansacParams(500, 2.0, 8), rng_seed=1)
    err = np.linalg.norm(t.apply(src[:n_in]) - dst[:n_in], axis=1)
    assert err.max() < 1.0


def test_too_few_or_degenerate():
    assert estimate_affine(as_corr(2), np.zeros((2, 2)), np.zeros((2, 2))) is None
    line = np.stack([np.arange(20.0), 2 * np.arange(20.0)], axis=1)
    assert estimate_affine(as_corr(20), line, line + 3) is None


def test_min_inliers():
    rng = np.random.default_rng(8)
    src = rng.uniform(0, 224, (6, 2))
    assert estimate_affine(as_corr(6), src, src + 1, RansacParams(100, 3, 8)) is None
    assert estimate_affine(as_corr(6), src, src + 1, RansacParams(100, 3, 5)) is not None


def test_deterministic_under_seed():
    rng = np.random.default_rng(9)
    src = rng.uniform(0, 224, (40, 2))
    dst = src + rng.normal(0, 1.5, src.shape)
    a = estimate_affine(as_corr(40), src, dst, rng_seed=3)
    b = estimate_affine(as_corr(40), src, dst, rng_seed=3)
    c = estimate_affine(as_corr(40), src, dst)
    d = estimate_affine(as_corr(40), src, dst)
    assert np.array_equal(a.m, b.m) and np.array_equal(c.m, d.m)


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 1000))
def test_translation_equivariance(dx, dy, seed):
    rng = np.random.default_rng(seed)
    m = AffineTransform.from_params(scale=rng.uniform(0.8, 1.2), rotation=rng.uniform(-30, 30),
                                    tx=rng.uniform(-10, 10), ty=rng.uniform(-10, 10)).m
    src, dst = planted_points(rng, 25, m)
    t0 = estimate_affine(as_corr(25), src, dst)
    t1 = estimate_affine(as_corr(25), src, dst + [dx, dy])
    assert abs(t1.tx - t0.tx - dx) < 1e-6 and abs(t1.ty - t0.ty - dy) < 1e-6


def test_lstsq_matches_normal_equations():
    rng = np.random.default_rng(10)
    src = rng.normal(size=(12, 2))
    dst = rng.normal(size=(12, 2))
    x = np.hstack([src, np.ones((12, 1))])
    ne = np.linalg.solve(x.T @ x, x.T @ dst).T
    assert np.allclose(fit_affine_lstsq(src, dst), ne, atol=1e-10)


# ---------------------------------------------------------------------------


def test_decompose_examples():
    assert np.allclose(decompose(np.eye(2, 3)), (1, 1, 0, 0, 0, 0))
    r = math.radians(30)
    rot = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0]])
    assert np.allclose(decompose(rot), (1, 1, 30, 0, 0, 0))
    assert np.allclose(decompose([[2, 0, 5], [0, 2, 0]]), (2, 2, 0, 0, 5, 0))
    with pytest.raises(GeometryError):
        decompose([[1, 2, 0], [2, 4, 0]])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_recompose_round_trip(vals):
    m = np.array(vals).reshape(2, 3)
    if abs(np.linalg.det(m[:, :2])) < 1e-3:
        return
    assert np.allclose(recompose(*decompose(m)), m, atol=1e-9, rtol=0)


def test_transform_ok_examples():
    lim = TransformLimits()
    assert transform_ok(AffineTransform.identity(), lim)
    assert not transform_ok(AffineTransform(np.array([[3.0, 0, 0], [0, 3.0, 0]])), lim)
    assert transform_ok(AffineTransform.from_params(rotation=30), lim)
    assert not transform_ok(AffineTransform.from_params(rotation=61), lim)
    assert not transform_ok(AffineTransform.from_params(tx=113), lim)
    assert not transform_ok(AffineTransform(np.array([[1.0, 0, 0], [0, -1.0, 0]])), lim)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(1.0, 5.0), st.floats(0.1, 180), st.floats(0.1, 500))
def test_identity_always_ok(smin, smax, rot, tr):
    assert transform_ok(AffineTransform.identity(), TransformLimits(smin, smax, rot, tr))


def test_limits_validation():
    with pytest.raises(GeometryError):
        TransformLimits(scale_min=1.5)
    with pytest.raises(GeometryError):
        TransformLimits(max_rotation=0)


# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def finger():
    return render_impression(gen_identity(11))


def test_warp_identity_bit_exact(finger):
    out = warp_image(finger, AffineTransform.identity())
    assert out.dtype == finger.dtype and np.array_equal(out, finger)
    f = finger.astype(np.float32) / 7
    assert np.array_equal(warp_image(f, AffineTransform.identity()), f)


def test_warp_translation(finger):
    out = warp_image(finger, AffineTransform.from_params(tx=16))
    assert np.array_equal(out[:, 16:], finger[:, :-16])
    assert np.all(out[:, :16] == 255)


def test_warp_out_of_frame(finger):
    out = warp_image(finger, AffineTransform.from_params(tx=1000), fill=7)
    assert np.all(out == 7)


def test_warp_singular_raises(finger):
    with pytest.raises(GeometryError):
        warp_image(finger, AffineTransform(np.zeros((2, 3))))


def test_warp_round_trip():
    # smooth image so bilinear resampling is nearly exact
    yy, xx = np.mgrid[0:224, 0:224] + 0.5
    img = 100 + 50 * np.sin(xx / 20) * np.cos(yy / 25)
    t = AffineTransform.from_params(scale=1.05, rotation=10, tx=5, ty=-3, center=(112, 112))
    back = warp_image(warp_image(img, t), t.inverse())
    inner = (slice(40, 184), slice(40, 184))
    assert np.max(np.abs(back[inner] - img[inner])) < 0.5


def test_warp_matches_analytic_resample():
    yy, xx = np.mgrid[0:64, 0:64] + 0.5
    img = 3.0 * xx + 2.0 * yy  # linear field: bilinear is exact
    t = AffineTransform.from_params(rotation=7, tx=1.3, ty=-0.6, center=(32, 32))
    out = warp_image(img, t)
    inv = t.inverse()
    src = inv.apply(np.stack([xx.ravel(), yy.ravel()], axis=1))
    expect = (3.0 * src[:, 0] + 2.0 * src[:, 1]).reshape(64, 64)
    inner = (slice(8, 56), slice(8, 56))
    assert np.allclose(out[inner], expect[inner], atol=1e-9)


def test_overlap_identical():
    img = np.random.default_rng(0).integers(0, 255, (64, 64)).astype(np.uint8)
    fg = np.ones((64, 64), bool)
    c1, c2 = overlap_masks(img, img, fg, fg)
    assert np.array_equal(c1, img) and np.array_equal(c2, img)


def test_overlap_disjoint():
    img = np.zeros((64, 64), np.uint8)
    left = np.zeros((64, 64), bool)
    left[:, :32] = True
    assert overlap_masks(img, img, left, ~left) is None


def test_overlap_shifted_rectangles():
    h = w = 128
    fa = np.zeros((h, w), bool)
    fa[20:100, 10:90] = True  # 80 x 80
    fb = np.zeros((h, w), bool)
    fb[20:100, 50:130] = True  # shifted by half its width
    img = np.zeros((h, w), np.uint8)
    c1, c2 = overlap_masks(img, img, fa, fb, fill=255)
    kept = (c1 == 0).sum()
    analytic = 80 * 40
    assert abs(kept - analytic) <= 80
    assert np.array_equal(c1, c2)


def test_overlap_shape_mismatch():
    with pytest.raises(GeometryError):
        overlap_masks(np.zeros((4, 4)), np.zeros((4, 5)), np.ones((4, 4)), np.ones((4, 5)))


def test_foreground_mask(finger):
    fg = foreground_mask(finger)
    assert fg[112, 112] and not fg[0, 0]


def test_occlusion(finger):
    assert np.array_equal(random_occlusion(finger, 0.0, 1), finger)
    for seed in range(5):
        out = random_occlusion(finger, 0.2, seed)
        assert abs(occluded_fraction(finger, out) - 0.2) <= 0.02
    assert np.array_equal(random_occlusion(finger, 0.3, 9), random_occlusion(finger, 0.3, 9))
    with pytest.raises(GeometryError):
        random_occlusion(finger, 1.0, 0)


def test_partial_affine(finger):
    assert np.array_equal(random_partial_affine(finger, 0.0, 1), finger)
    for seed in range(5):
        out = random_partial_affine(finger, 0.4, seed)
        assert abs(1 - occluded_fraction(finger, out) - 0.6) <= 0.02
        kept = out != 255
        assert np.array_equal(out[kept], finger[kept])
    assert np.array_equal(random_partial_affine(finger, 0.3, 2), random_partial_affine(finger, 0.3, 2))
    with pytest.raises(GeometryError):
        random_partial_affine(finger, 1.2, 0)
