import math
import warnings

import numpy as np
import pytest

import oracles
from dnl.errors import ContractViolation
from dnl.metrics import (
    PSNR_INFINITE, MetricsRecord, composite_score, evaluate_pair, finite_mean, psnr, ssim, ssim_map,
)

# (PSNR, SSIM, est. Score) rows of the architecture sweep table
SWEEP_ROWS = [
    (37.923, 0.959, 1.907), (38.128, 0.967, 1.920), (38.480, 0.967, 1.929), (38.591, 0.964, 1.929),
    (38.508, 0.968, 1.931), (38.313, 0.963, 1.921), (37.585, 0.955, 1.895), (38.577, 0.965, 1.929),
    (38.254, 0.963, 1.919), (37.924, 0.948, 1.896),
]


def test_composite_score_selected_model():
    assert composite_score(38.91372, 0.97129) == pytest.approx(1.94413, abs=1e-5)


@pytest.mark.parametrize("p,s,score", SWEEP_ROWS)
def test_composite_score_sweep_rows(p, s, score):
    assert composite_score(p, s) == pytest.approx(score, abs=1e-3)


def test_metrics_record_recomputes_score():
    r = MetricsRecord("a", 40.0, 0.5)
    assert r.est_score == 1.5


def test_psnr_against_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.random((1, 1, 16, 16))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        assert psnr(a, b) == pytest.approx(oracles.psnr(a, b), abs=1e-9)
        assert psnr(a, b, data_range=2.0) == pytest.approx(oracles.psnr(a, b, 2.0), abs=1e-9)


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(1).random((8, 8))
    assert psnr(a, a) == PSNR_INFINITE == math.inf


def test_psnr_known_value():
    a = np.zeros((10, 10))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(2)
    clean = rng.random((64, 64))
    z = rng.normal(size=clean.shape)
    values = [psnr(clean, clean + math.sqrt(v) * z) for v in (1e-4, 1e-3, 1e-2)]
    assert values[0] > values[1] > values[2]


def test_ssim_identical_exactly_one_and_symmetric():
    rng = np.random.default_rng(3)
    a = rng.random((1, 1, 32, 32))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, a) == 1.0
    assert ssim(a, b) == ssim(b, a)
    assert ssim(a, b) < 1.0


def test_ssim_constant_images_closed_form():
    # constant images: zero variance, so SSIM reduces to the luminance term
    x, y = np.full((16, 16), 0.2), np.full((16, 16), 0.6)
    c1 = (0.01) ** 2
    expected = (2 * 0.2 * 0.6 + c1) / (0.2**2 + 0.6**2 + c1)
    assert ssim(x, y) == pytest.approx(expected, abs=1e-12)


def test_ssim_against_direct_window_loop():
    rng = np.random.default_rng(4)
    a, b = rng.random((13, 14)), rng.random((13, 14))
    ax = np.arange(11) - 5.0
    g = np.exp(-(ax**2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(3):
        for j in range(4):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * pa * pa).sum() - ma**2, (w * pb * pb).sum() - mb**2
            cov = (w * pa * pb).sum() - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert ssim_map(a, b).shape == (3, 4)
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-12)


def test_ssim_decreases_with_noise():
    rng = np.random.default_rng(5)
    clean = rng.random((48, 48))
    z = rng.normal(size=clean.shape)
    values = [ssim(clean, clean + s * z) for s in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


def test_contracts():
    with pytest.raises(ContractViolation):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ContractViolation):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_finite_mean_excludes_infinite_with_warning():
    with pytest.warns(RuntimeWarning, match="1 infinite"):
        assert finite_mean([30.0, math.inf, 40.0]) == 35.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert finite_mean([1.0, 3.0]) == 2.0


def test_evaluate_pair():
    a = np.random.default_rng(6).random((1, 1, 16, 16))
    r = evaluate_pair("x", a, a * 0.9)
    assert r.image_id == "x"
    assert r.est_score == pytest.approx(r.psnr_db / 40 + r.ssim)
