import math

import numpy as np
import pytest

from sarmim.errors import ValidationError
from sarmim.features import (RoaKernelBank, batched_patch_target_vectors,
                             compute_target, diff_gradient_magnitude,
                             gr_single_scale, hog_target, lpf_target,
                             multi_scale_target, patch_target_vectors,
                             patch_targets, roa_ratios, target_dim)

from conftest import random_amplitude


# ---------------------------------------------------------------------------
# Independent oracles: explicit padding and per-pixel loops, written against
# the contract, not the implementation.


def naive_roa(img, r, kernel_kind="linear", epsilon=1e-2):
    img = img.astype(np.float64) + epsilon
    h, w = img.shape
    padded = np.pad(img, r, mode="reflect")
    if kernel_kind == "linear":
        def weight(dy, dx):
            return 1.0
    else:
        sigma = 0.3 * (r - 1) + 0.8

        def weight(dy, dx):
            return math.exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma))

    def half_mean(y, x, dys, dxs):
        total, wsum = 0.0, 0.0
        for dy in dys:
            for dx in dxs:
                wt = weight(dy, dx)
                total += wt * padded[y + r + dy, x + r + dx]
                wsum += wt
        return total / wsum

    r1 = np.zeros((h, w))
    r3 = np.zeros((h, w))
    full = range(-r, r + 1)
    pos = range(1, r + 1)
    neg = range(-r, 0)
    for y in range(h):
        for x in range(w):
            r1[y, x] = half_mean(y, x, full, pos) / half_mean(y, x, full, neg)
            r3[y, x] = half_mean(y, x, pos, full) / half_mean(y, x, neg, full)
    return r1, r3


def naive_gr(img, r, kernel_kind="linear", epsilon=1e-2):
    r1, r3 = naive_roa(img, r, kernel_kind, epsilon)
    gh, gv = np.log(r1), np.log(r3)
    return gh, gv, np.sqrt(gh ** 2 + gv ** 2)


def naive_hog(img, cell, bins=9):
    """Differential HOG: centered differences on the mirror-padded image,
    per-pixel bilinear votes into per-cell histograms, L2-floored norm."""
    img = img.astype(np.float64)
    h, w = img.shape
    padded = np.pad(img, 1, mode="reflect")
    rows, cols = h // cell, w // cell
    hist = np.zeros((rows, cols, bins))
    for y in range(h):
        for x in range(w):
            gx = (padded[y + 1, x + 2] - padded[y + 1, x]) / 2.0
            gy = (padded[y + 2, x + 1] - padded[y, x + 1]) / 2.0
            mag = math.hypot(gx, gy)
            ang = math.degrees(math.atan2(gy, gx)) % 180.0
            slot = ang / (180.0 / bins) - 0.5
            lo = math.floor(slot)
            frac = slot - lo
            hist[y // cell, x // cell, lo % bins] += mag * (1.0 - frac)
            hist[y // cell, x // cell, (lo + 1) % bins] += mag * frac
    for i in range(rows):
        for j in range(cols):
            hist[i, j] /= max(np.linalg.norm(hist[i, j]), 1e-6)
    return hist


# ---------------------------------------------------------------------------
# roa_ratios


def test_roa_constant_image_is_one():
    img = np.full((24, 24), 3.7, dtype=np.float32)
    r1, r3 = roa_ratios(img, r=3)
    assert np.allclose(r1, 1.0, atol=1e-12)
    assert np.allclose(r3, 1.0, atol=1e-12)


def test_roa_vertical_step_analytic():
    img = np.ones((32, 32), dtype=np.float32)
    img[:, 16:] = math.e
    r = 3
    r1, r3 = roa_ratios(img, r=r, epsilon=0.0)
    # pixel at x=15: right half entirely in the e region, left half in ones
    # (e is stored in float32, hence the tolerance)
    assert r1[16, 15] == pytest.approx(math.e, rel=1e-7)
    assert r3[16, 15] == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("kernel_kind", ["linear", "gaussian"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_roa_matches_naive_oracle(kernel_kind, seed):
    rng = np.random.default_rng(seed)
    img = random_amplitude(rng)
    got = roa_ratios(img, r=3, kernel_kind=kernel_kind)
    want = naive_roa(img, r=3, kernel_kind=kernel_kind)
    for g, w in zip(got, want):
        assert np.abs(g / w - 1).max() < 1e-6


def test_roa_scale_too_large():
    img = np.ones((16, 16), dtype=np.float32)
    with pytest.raises(ValidationError, match="scale too large"):
        roa_ratios(img, r=8)


# ---------------------------------------------------------------------------
# gr_single_scale


def test_gr_constant_image_zero():
    img = np.full((24, 24), 5.0, dtype=np.float32)
    field = gr_single_scale(img, r=3)
    assert np.allclose(field.g_h, 0.0, atol=1e-12)
    assert np.allclose(field.g_v, 0.0, atol=1e-12)
    assert np.allclose(field.g_m, 0.0, atol=1e-12)


def test_gr_vertical_step_analytic():
    img = np.ones((32, 32), dtype=np.float32)
    img[:, 16:] = math.e
    field = gr_single_scale(img, r=3, epsilon=0.0)
    assert field.g_h[16, 15] == pytest.approx(1.0, rel=1e-7)
    assert field.g_v[16, 15] == pytest.approx(0.0, abs=1e-12)
    assert field.g_m[16, 15] == pytest.approx(1.0, rel=1e-7)


def max_rel_error(a, b, floor=1e-9):
    """Max relative error, ignoring entries where both values are ~0."""
    scale = np.maximum(np.abs(a), np.abs(b))
    err = np.abs(a - b)
    rel = np.where(scale > floor, err / np.maximum(scale, floor), 0.0)
    assert err[scale <= floor].max(initial=0.0) <= floor
    return rel.max()


@pytest.mark.parametrize("c", [0.1, 37.5, 1000.0])
@pytest.mark.parametrize("kernel_kind", ["linear", "gaussian"])
def test_gr_scale_invariance(rng, c, kernel_kind):
    # scaling happens in float64: the test targets the operator's CFAR
    # property, not input quantization
    img = random_amplitude(rng).astype(np.float64)
    base = gr_single_scale(img, r=5, kernel_kind=kernel_kind, epsilon=0.0)
    scaled = gr_single_scale(c * img, r=5, kernel_kind=kernel_kind, epsilon=0.0)
    for a, b in zip((base.g_h, base.g_v, base.g_m),
                    (scaled.g_h, scaled.g_v, scaled.g_m)):
        assert max_rel_error(a, b) < 1e-6


def test_diff_gradient_scales_with_signal(rng):
    # the contrast sensitivity that motivates ratio gradients: centered
    # differences scale linearly with the signal (exact up to rounding)
    img = random_amplitude(rng).astype(np.float64)
    c = 37.5
    base = diff_gradient_magnitude(img)
    scaled = diff_gradient_magnitude(c * img)
    assert np.allclose(scaled, c * base, rtol=1e-12, atol=1e-15)


def test_gr_hflip_symmetry(rng):
    img = random_amplitude(rng, 40, 40)
    field = gr_single_scale(img, r=4)
    flipped = gr_single_scale(np.ascontiguousarray(img[:, ::-1]), r=4)
    assert np.allclose(flipped.g_h, -field.g_h[:, ::-1], atol=1e-9)
    assert np.allclose(flipped.g_v, field.g_v[:, ::-1], atol=1e-9)


def test_gr_magnitude_consistency(rng):
    img = random_amplitude(rng)
    field = gr_single_scale(img, r=3)
    assert np.allclose(field.g_m, np.hypot(field.g_h, field.g_v), atol=1e-12)


# ---------------------------------------------------------------------------
# multi_scale_target


def test_multi_scale_shape_and_channel_order(rng):
    img = random_amplitude(rng, 64, 64)
    bank = RoaKernelBank()
    tf = multi_scale_target(img, bank)
    assert tf.shape == (4, 64, 64)
    first = gr_single_scale(img, r=5, kernel_kind="linear", epsilon=bank.epsilon)
    assert np.array_equal(tf[0], first.g_m)


@pytest.mark.parametrize("seed", [3, 4])
def test_multi_scale_matches_stacked_oracles(seed):
    rng = np.random.default_rng(seed)
    img = random_amplitude(rng, 40, 40)
    bank = RoaKernelBank(scales=(3, 5), kernel_kind="linear")
    tf = multi_scale_target(img, bank)
    for k, r in enumerate(bank.scales):
        _, _, gm = naive_gr(img, r, "linear", bank.epsilon)
        assert np.abs(tf[k] - gm).max() < 1e-6


def test_scale_ordering_under_speckle():
    # pure speckle: bigger half-windows average more samples, so the mean
    # log-ratio magnitude must drop from r=5 to r=17
    from sarmim.imagery import apply_speckle
    means5, means17 = [], []
    refl = np.ones((64, 64), dtype=np.float32)
    for seed in range(100):
        img = apply_speckle(refl, looks=1, seed=seed)
        means5.append(gr_single_scale(img, r=5).g_m.mean())
        means17.append(gr_single_scale(img, r=17).g_m.mean())
    assert np.mean(means17) < np.mean(means5)


# ---------------------------------------------------------------------------
# hog_target


def test_hog_constant_image_zero():
    img = np.full((32, 32), 2.0, dtype=np.float32)
    tf = hog_target(img, cell=8)
    assert tf.shape == (9, 32, 32)
    assert np.allclose(tf, 0.0)


def test_hog_scale_invariance_of_normalized_blocks(rng):
    img = random_amplitude(rng)
    a = hog_target(img, cell=8)
    b = hog_target((37.5 * img).astype(np.float32), cell=8)
    assert np.allclose(a, b, atol=1e-10)


@pytest.mark.parametrize("seed", [5, 6])
def test_hog_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    img = random_amplitude(rng)
    tf = hog_target(img, cell=8)
    want = naive_hog(img, cell=8)
    for i in range(4):
        for j in range(4):
            got = tf[:, i * 8, j * 8]
            assert np.abs(got - want[i, j]).max() < 1e-5


def test_hog_ratio_kind_channel_count(rng):
    img = random_amplitude(rng, 48, 48)
    bank = RoaKernelBank(scales=(3, 5))
    tf = hog_target(img, cell=8, gradient_kind="ratio", bank=bank)
    assert tf.shape == (18, 48, 48)


def test_hog_indivisible_cell_errors():
    img = np.ones((30, 30), dtype=np.float32)
    with pytest.raises(ValidationError, match="divisible"):
        hog_target(img, cell=8)


# ---------------------------------------------------------------------------
# lpf_target


def test_lpf_identity_at_full_cutoff(rng):
    img = random_amplitude(rng, 64, 64)
    out = lpf_target(img, cutoff_fraction=1.0)
    assert np.abs(out[0] - img).max() < 1e-6


def test_lpf_preserves_constant():
    img = np.full((32, 32), 4.2, dtype=np.float32)
    for cutoff in (0.0, 0.25, 0.5):
        out = lpf_target(img, cutoff_fraction=cutoff)
        assert np.abs(out[0] - img).max() < 1e-6


def test_lpf_removes_nyquist_checkerboard():
    y, x = np.mgrid[0:32, 0:32]
    img = (1.0 + 0.5 * (-1.0) ** (x + y)).astype(np.float32)
    out = lpf_target(img, cutoff_fraction=0.25)
    assert np.abs(out[0] - 1.0).max() < 1e-6


# ---------------------------------------------------------------------------
# patch_targets


def test_patch_targets_constant_patch_zeroed():
    tf = np.full((2, 16, 16), 3.0)
    vecs = patch_targets(tf, p=8)
    assert vecs.shape == (4, 128)
    assert np.all(vecs == 0.0)


def test_patch_targets_standardization(rng):
    tf = rng.normal(2.0, 3.0, size=(4, 64, 64))
    vecs = patch_targets(tf, p=8)
    assert vecs.shape == (64, 256)
    per_channel = vecs.reshape(64, 4, 64)
    assert np.abs(per_channel.mean(axis=-1)).max() < 1e-4
    assert np.abs(per_channel.var(axis=-1) - 1.0).max() < 1e-4


def test_patch_targets_channel_major_layout(rng):
    tf = rng.normal(size=(2, 8, 8))
    vecs = patch_targets(tf, p=8)
    block0 = (tf[0] - tf[0].mean()) / np.sqrt(tf[0].var() + 1e-6)
    assert np.allclose(vecs[0, :64], block0.ravel())


def test_patch_targets_indivisible_errors():
    with pytest.raises(ValidationError, match="divisible"):
        patch_targets(np.ones((1, 30, 30)), p=8)


# ---------------------------------------------------------------------------
# feature dispatch used by the trainer


@pytest.mark.parametrize("kind,expected", [
    ("pixel", 64), ("lpf", 64), ("grlin", 256), ("grgau", 256),
    ("hog", 9), ("sarhog", 36),
])
def test_target_dims(kind, expected):
    assert target_dim(kind, 8, RoaKernelBank()) == expected


@pytest.mark.parametrize("kind", ["pixel", "lpf", "grlin", "hog"])
def test_patch_target_vector_shapes(rng, kind):
    img = random_amplitude(rng, 64, 64)
    bank = RoaKernelBank()
    tf = compute_target(img, kind, bank, patch_side=8)
    vecs = patch_target_vectors(tf, 8, kind)
    assert vecs.shape == (64, target_dim(kind, 8, bank))


def test_hog_vectors_keep_histograms(rng):
    # cell-resolution features skip standardization: the vector is the
    # cell's histogram, not a zeroed block
    img = random_amplitude(rng, 64, 64)
    tf = compute_target(img, "hog", RoaKernelBank(), patch_side=8)
    vecs = patch_target_vectors(tf, 8, "hog")
    assert vecs.shape == (64, 9)
    assert np.allclose(vecs[0], tf[:, 0, 0])
    assert vecs.max() > 0


def test_batched_vectors_match_per_image(rng):
    imgs = np.stack([random_amplitude(rng, 64, 64) for _ in range(3)])
    bank = RoaKernelBank()
    batched = batched_patch_target_vectors(imgs, "grlin", bank, p=8)
    for i in range(3):
        tf = compute_target(imgs[i], "grlin", bank, 8)
        single = patch_target_vectors(tf, 8, "grlin")
        assert np.array_equal(batched[i], single)
