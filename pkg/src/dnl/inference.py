"""Tweedie posterior-mean denoising and the two trained-model denoisers."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import Gamma, Gaussian, NoiseModel, Poisson
from .errors import ContractViolation, TweedieSingularityError
from .nn import GeneratorConfig, ModelParams, generator_forward
from .tensor import Tensor


def tweedie_denoise(y: Tensor, score: Tensor, model: NoiseModel) -> Tensor:
    """Posterior mean from an observation and the score of its density.

    Gaussian:  y + sigma2 * score
    Poisson:   (y + zeta / 2) * exp(zeta * score)
    Gamma:     alpha * y / ((alpha - 1) - y * score)
    """
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    sd = np.asarray(score.data if isinstance(score, Tensor) else score, dtype=np.float64)
    if yd.shape != sd.shape:
        raise ContractViolation(f"score shape {sd.shape} does not match observation {yd.shape}")
    if isinstance(model, Gaussian):
        out = yd + model.sigma2 * sd
    elif isinstance(model, Poisson):
        out = (yd + model.zeta / 2.0) * np.exp(model.zeta * sd)
    elif isinstance(model, Gamma):
        den = (model.alpha - 1.0) - yd * sd
        bad = int(np.count_nonzero(~(den > 0)))
        if bad:
            raise TweedieSingularityError(bad)
        out = model.alpha * yd / den
    else:
        raise ContractViolation(f"unsupported noise model {model!r}")
    dtype = y.dtype if isinstance(y, Tensor) else np.float64
    return Tensor(out.astype(dtype))


def score_config(cfg: GeneratorConfig) -> GeneratorConfig:
    """The same backbone with the global skip switched off."""
    return replace(cfg, global_skip=False)


def denoise_n2s(rtheta: ModelParams, cfg: GeneratorConfig, y: Tensor, model: NoiseModel) -> Tensor:
    """Score from the AR-DAE network's raw branch output, then Tweedie."""
    score = generator_forward(rtheta, score_config(cfg), Tensor(y.data))
    return tweedie_denoise(y, score, model)


def denoise_cyclegan(g_q2f: ModelParams, cfg: GeneratorConfig, y: Tensor) -> Tensor:
    """Low-dose to normal-dose translation, clamped to [0, 1] for scoring."""
    out = generator_forward(g_q2f, cfg, Tensor(y.data))
    return Tensor(np.clip(out.data, 0.0, 1.0))
