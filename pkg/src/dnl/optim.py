"""Adam and the constant-then-linear learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractViolation(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ContractViolation("Adam eps must be positive")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1=0.5, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``.

    A ``None`` gradient is treated as zero.  Returns ``(params, state)``.
    """
    if lr <= 0:
        raise ContractViolation(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ContractViolation("adam_step: params, grads and moment buffers differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape or v.shape != p.shape:
            raise ContractViolation(f"moment buffer shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractViolation(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """Constant ``base_lr`` until ``decay_start_epoch``, then linear decay to 0 at ``total_epochs``."""

    base_lr: float
    decay_start_epoch: int
    total_epochs: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractViolation("base_lr must be positive")
        if not 0 <= self.decay_start_epoch <= self.total_epochs:
            raise ContractViolation(
                f"need 0 <= decay_start_epoch <= total_epochs, got {self.decay_start_epoch}, {self.total_epochs}"
            )


def lr_at(epoch: int, s: LrSchedule) -> float:
    """Learning rate for 0-based ``epoch``."""
    if not 0 <= epoch < s.total_epochs:
        raise ContractViolation(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.decay_start_epoch:
        return s.base_lr
    span = s.total_epochs - s.decay_start_epoch
    return s.base_lr * (s.total_epochs - epoch) / span
