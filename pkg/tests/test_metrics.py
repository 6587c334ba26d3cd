import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from skimage.filters import threshold_otsu
from skimage.metrics import structural_similarity

from semfl.datagen import NoiseConfig, generate_layout, render_sem
from semfl.metrics import (
    MetricsError,
    binarize,
    evaluate_reconstruction,
    iou,
    mse_norm,
    otsu_threshold,
    psnr,
    ssim,
    unsupervised_resegment,
)


def _render(mask, seed=0, **kw):
    return render_sem(mask, NoiseConfig(**{"seed": seed, **kw}))


# --- IoU -------------------------------------------------------------------
def test_iou_basic():
    m = generate_layout(32, 32, 0.4, 0)
    assert iou(m, m) == 1.0
    a = np.zeros((4, 4), dtype=np.uint8)
    b = a.copy()
    a[0, :2] = 1
    b[3, :2] = 1
    assert iou(a, b) == 0.0
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_iou_half_cover():
    truth = np.zeros((4, 4), dtype=np.uint8)
    truth[1, :] = 1  # 4 px
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[1, :2] = 1  # 2 px inside truth
    assert iou(pred, truth) == 0.5


def test_iou_shape_mismatch():
    with pytest.raises(MetricsError):
        iou(np.zeros((4, 4)), np.zeros((4, 5)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), arrays(np.uint8, (8, 8), elements=st.integers(0, 1)))
def test_iou_threshold_consistency(prob, truth):
    assert iou(prob, truth) == iou(binarize(prob), truth)
    assert 0.0 <= iou(prob, truth) <= 1.0


# --- MSE / PSNR ------------------------------------------------------------
def test_mse_values():
    z = np.zeros((5, 5))
    assert mse_norm(z, z) == 0
    assert mse_norm(z, np.ones((5, 5))) == 1.0
    assert mse_norm(z, np.full((5, 5), 0.5)) == 0.25


def test_psnr_values():
    assert psnr(1.0) == 0.0
    assert psnr(0.01) == pytest.approx(20.0)
    assert psnr(0.0) == math.inf
    with pytest.raises(MetricsError):
        psnr(-0.1)


def test_psnr_monotone_in_noise_amplitude():
    img = _render(generate_layout(64, 64, 0.4, 1)).image
    means = []
    for amp in (0.01, 0.05, 0.1, 0.2):
        vals = []
        for seed in range(5):
            noisy = np.clip(img + np.random.default_rng(seed).normal(0, amp, img.shape), 0, 1)
            vals.append(psnr(mse_norm(img, noisy)))
        means.append(np.mean(vals))
    assert all(a >= b for a, b in zip(means, means[1:]))


# --- SSIM ------------------------------------------------------------------
def test_ssim_matches_reference_implementation(rng):
    a = rng.random((40, 50))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_ssim_identity_and_inversion():
    m = generate_layout(64, 64, 0.4, 3).astype(np.float64)
    assert ssim(m, m) == pytest.approx(1.0)
    assert ssim(m, 1 - m) < 0


def test_ssim_same_mask_beats_different_mask():
    m1, m2 = generate_layout(64, 64, 0.4, 4), generate_layout(64, 64, 0.4, 5)
    a, b, c = _render(m1, 1).image, _render(m1, 2).image, _render(m2, 3).image
    assert ssim(a, b) > ssim(a, c) + 0.05


def test_ssim_too_small():
    with pytest.raises(MetricsError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (12, 12), elements=st.floats(0, 1)),
    arrays(np.float64, (12, 12), elements=st.floats(0, 1)),
)
def test_metric_ranges_and_symmetry(a, b):
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert mse_norm(a, b) == pytest.approx(mse_norm(b, a))
    assert 0 <= mse_norm(a, b) <= 1
    assert ssim(a, a) == pytest.approx(1.0)


# --- Otsu / re-segmentation -------------------------------------------------
def test_otsu_matches_reference(rng):
    v = np.concatenate([rng.normal(0.3, 0.05, 3000), rng.normal(0.6, 0.07, 2000)])
    assert otsu_threshold(v) == pytest.approx(threshold_otsu(v), abs=1e-12)


def test_resegment_clean_render():
    mask = generate_layout(64, 64, 0.4, 6)
    s = _render(mask, 0, std_dev=1.0, shot_noise=0)
    seg = unsupervised_resegment(s.image)
    assert not seg.degenerate
    assert iou(seg.mask, mask) > 0.95


def test_resegment_constant_is_flagged():
    seg = unsupervised_resegment(np.full((32, 32), 0.4))
    assert seg.degenerate and seg.mask.sum() == 0


def test_resegment_paper_noise_robust():
    scores = []
    for i in range(5):
        mask = generate_layout(64, 64, 0.4, 10 + i)
        scores.append(iou(unsupervised_resegment(_render(mask, i).image).mask, mask))
    assert min(scores) > 0.8


# --- reconstruction evaluation ---------------------------------------------
def test_evaluate_reconstruction_identity():
    mask = generate_layout(64, 64, 0.4, 7)
    s = _render(mask, 1)
    rep = evaluate_reconstruction(s.image, s)
    assert rep.mse == 0 and rep.psnr == math.inf
    assert rep.preprocessing == "unsupervised_resegmentation"
    baseline = ssim(unsupervised_resegment(s.image).mask.astype(float), mask.astype(float))
    assert rep.ssim == pytest.approx(baseline)
    assert rep.to_json()["psnr"] == "inf"


def test_evaluate_reconstruction_random_noise():
    vals = []
    for i in range(3):
        mask = generate_layout(64, 64, 0.4, 20 + i)
        s = _render(mask, i)
        rep = evaluate_reconstruction(np.random.default_rng(i).random((64, 64)), s)
        vals.append(rep)
        assert rep.psnr < 10.0
    assert abs(np.mean([r.ssim for r in vals])) < 0.1


def test_evaluate_reconstruction_one_pixel():
    mask = generate_layout(64, 64, 0.4, 8)
    s = _render(mask, 2)
    recon = s.image.copy()
    recon[0, 0] = 1.0 - round(recon[0, 0])  # flip to the opposite extreme
    delta = recon[0, 0] - s.image[0, 0]
    rep = evaluate_reconstruction(recon, s)
    assert rep.mse == pytest.approx(delta**2 / 4096)
    full = np.zeros((64, 64))
    full[0, 0] = 1.0
    assert mse_norm(np.zeros((64, 64)), full) == pytest.approx(2.44e-4, rel=1e-3)
