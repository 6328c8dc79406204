"""LSGAN, L1 cycle/identity, composite objectives and the AR-DAE loss.

Expectations are means over every element (batch and spatial positions).
All functions accept :class:`Tensor` inputs and stay differentiable; the two
composite totals also accept plain floats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 30.0
    lambda_iden: float = 2.0

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_iden"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ContractViolation(f"{name} must be finite and >= 0, got {v}")


def _nonempty(*ts: Tensor) -> None:
    for t in ts:
        if t.size == 0:
            raise ContractViolation("loss input is empty")


def lsgan_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """mean((real - 1)^2) + mean(fake^2)."""
    _nonempty(real_scores, fake_scores)
    return T.mean_all(T.square(real_scores - 1.0)) + T.mean_all(T.square(fake_scores))


def lsgan_g_loss(fake_scores: Tensor) -> Tensor:
    """mean((fake - 1)^2): the generator wants its fakes scored as real."""
    _nonempty(fake_scores)
    return T.mean_all(T.square(fake_scores - 1.0))


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    _nonempty(a)
    return T.mean_all(T.abs_(a - b))


def generator_total(adv_F, adv_Q, cyc_F, cyc_Q, idn_F, idn_Q, w: LossWeights):
    return (adv_F + adv_Q) + w.lambda_cycle * (cyc_F + cyc_Q) + w.lambda_iden * (idn_F + idn_Q)


def discriminator_total(adv):
    return adv * 0.5


def ardae_loss(u: Tensor, sigma_a: float, r_out: Tensor) -> Tensor:
    """mean((u + sigma_a * r_out)^2) over all elements."""
    if u.shape != r_out.shape:
        raise ContractViolation(f"ardae_loss shape mismatch: u {u.shape} vs r_out {r_out.shape}")
    _nonempty(u)
    return T.mean_all(T.square(u + r_out * float(sigma_a)))
