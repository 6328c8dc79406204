import numpy as np
import pytest

from dnl.data import Gamma, Gaussian, Poisson
from dnl.errors import TweedieSingularityError
from dnl.inference import denoise_cyclegan, denoise_n2s, score_config, tweedie_denoise
from dnl.nn import GeneratorConfig, build_generator, zero_params
from dnl.tensor import Tensor


def t(v):
    return Tensor(np.asarray(v, dtype=np.float64))


def test_gaussian_zero_score_is_identity():
    y = t(np.random.default_rng(0).random((2, 3)))
    assert tweedie_denoise(y, t(np.zeros((2, 3))), Gaussian(0.3)).data.tobytes() == y.data.tobytes()


def test_poisson_zero_score():
    assert tweedie_denoise(t([1.0]), t([0.0]), Poisson(0.01)).data[0] == pytest.approx(1.005, abs=1e-9)


def test_gamma_zero_score():
    assert tweedie_denoise(t([1.0]), t([0.0]), Gamma(2.0)).data[0] == pytest.approx(2.0, abs=1e-9)


@pytest.mark.parametrize("y,score", [(1.0, 1.0), (2.0, 0.5), (0.5, 4.0)])
def test_gamma_singularity(y, score):
    # (alpha - 1) - y * score <= 0 with alpha = 2
    with pytest.raises(TweedieSingularityError) as exc:
        tweedie_denoise(t([y, 0.1]), t([score, 0.0]), Gamma(2.0))
    assert exc.value.n_pixels == 1


def test_formulas_against_direct_expressions():
    rng = np.random.default_rng(1)
    y, s = rng.random(50) + 0.1, rng.normal(size=50) * 0.1
    np.testing.assert_allclose(tweedie_denoise(t(y), t(s), Gaussian(0.04)).data, y + 0.04 * s, rtol=1e-14)
    np.testing.assert_allclose(tweedie_denoise(t(y), t(s), Poisson(0.02)).data, (y + 0.01) * np.exp(0.02 * s),
                               rtol=1e-14)
    np.testing.assert_allclose(tweedie_denoise(t(y), t(s), Gamma(5.0)).data, 5 * y / (4 - y * s), rtol=1e-14)


def test_analytic_gaussian_score_recovers_mean():
    mu, s2 = 0.37, 0.02
    y = np.random.default_rng(2).normal(mu, np.sqrt(s2), 1000)
    out = tweedie_denoise(t(y), t((mu - y) / s2), Gaussian(s2)).data
    np.testing.assert_allclose(out, mu, atol=1e-6)


def test_output_keeps_float32():
    y = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    assert tweedie_denoise(y, Tensor(np.zeros((1, 1, 2, 2))), Poisson(0.01)).dtype == np.float32


def test_score_mode_switch():
    cfg = GeneratorConfig(ngf=4, depth=2)
    assert score_config(cfg).global_skip is False and cfg.global_skip is True


def test_denoisers_with_zero_networks():
    cfg = GeneratorConfig(ngf=4, depth=2)
    params = zero_params(build_generator(cfg, 0))
    y = Tensor(np.random.default_rng(3).normal(0.5, 0.4, (1, 1, 16, 16)).astype(np.float32))
    # zero score: Gaussian Tweedie returns y itself
    assert denoise_n2s(params, cfg, y, Gaussian(0.01)).data.tobytes() == y.data.tobytes()
    # identity generator, clamped to the display range
    np.testing.assert_array_equal(denoise_cyclegan(params, cfg, y).data, np.clip(y.data, 0, 1))
