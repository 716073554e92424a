import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from weightleak.exceptions import ContractError
from weightleak.metrics import (
    PSNR_CAP,
    best_assignment,
    eval_window,
    image_scores,
    psnr,
    ssim,
    success_rate,
    summarize_results,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_psnr_examples(rng):
    a = rng.uniform(size=(3, 8, 8))
    assert psnr(a, a) == PSNR_CAP == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)
    b = rng.uniform(size=(3, 8, 8))
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / np.mean((a - b) ** 2)), abs=1e-10)
    assert psnr(a, b, peak=255.0) == pytest.approx(10 * math.log10(255.0**2 / np.mean((a - b) ** 2)), abs=1e-10)


def test_psnr_errors():
    with pytest.raises(ContractError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.ones(3), peak=0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 16, elements=unit), arrays(np.float64, 16, elements=unit))
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreasing_in_mse(rng):
    a = rng.uniform(size=64)
    d = rng.normal(size=64)
    values = [psnr(a, a + s * d) for s in (1e-4, 1e-3, 1e-2, 1e-1)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ssim_identity(rng):
    a = rng.uniform(size=(3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("p,q", [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0)])
def test_ssim_constant_images(p, q):
    c1 = 0.01**2
    expected = (2 * p * q + c1) / (p * p + q * q + c1)
    assert ssim(np.full((12, 12), p), np.full((12, 12), q)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference_implementation(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(16, 16))
    b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_channels_averaged(rng):
    a, b = rng.uniform(size=(3, 14, 14)), rng.uniform(size=(3, 14, 14))
    per = [ssim(a[c], b[c]) for c in range(3)]
    assert ssim(a, b) == pytest.approx(np.mean(per), abs=1e-12)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (11, 11), elements=unit), arrays(np.float64, (11, 11), elements=unit))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ContractError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_eval_window():
    assert eval_window((3, 8, 8)) == 7
    assert eval_window((3, 32, 32)) == 11
    assert eval_window((1, 10, 12)) == 9


def test_image_scores_clamp(rng):
    truth = rng.uniform(size=(3, 8, 8))
    truth[truth > 0.9] = 1.0
    truth[truth < 0.1] = 0.0
    rec = truth + 5.0 * (truth == 1.0) - 3.0 * (truth == 0.0)
    p, s = image_scores(rec, truth)
    assert p == PSNR_CAP and s == pytest.approx(1.0)


def test_best_assignment_finds_permutation(rng):
    truth = rng.uniform(size=(3, 1, 4, 4))
    perm, scores = best_assignment(truth[[2, 0, 1]], truth)
    assert perm == (1, 2, 0)
    assert scores == [PSNR_CAP] * 3
    with pytest.raises(ValueError):
        best_assignment(np.zeros((9, 1, 2, 2)), np.zeros((9, 1, 2, 2)))


def test_success_rate_examples():
    assert success_rate([100.0] * 4).acc == 1.0
    s = success_rate([29.0, 31.0], [0.5, 0.7], threshold_db=30)
    assert (s.acc, s.mean_psnr, s.mean_ssim, s.n_trials) == (0.5, 30.0, 0.6, 2)
    with pytest.raises(ValueError):
        success_rate([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.floats(0, 100), st.floats(0, 100))
def test_success_rate_monotone_in_threshold(psnrs, t1, t2):
    lo, hi = sorted((t1, t2))
    assert success_rate(psnrs, threshold_db=hi).acc <= success_rate(psnrs, threshold_db=lo).acc


def test_summarize_results_dicts():
    rows = [{"final_psnr": p, "final_ssim": 0.5, "success_threshold_db": 30.0} for p in (10, 40, 50)]
    s = summarize_results(rows)
    assert s.acc == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        summarize_results([{"final_psnr": None, "final_ssim": None, "success_threshold_db": 30}])
