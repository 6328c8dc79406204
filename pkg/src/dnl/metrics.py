"""PSNR, SSIM and the composite PSNR/40 + SSIM score."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor

# PSNR of two identical images; never averaged in with finite values.
PSNR_INFINITE = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(reference, test, data_range: float = 1.0) -> float:
    """10 log10(data_range^2 / MSE) in dB; ``PSNR_INFINITE`` when MSE is 0."""
    r, t = _arr(reference), _arr(test)
    if r.shape != t.shape:
        raise ContractViolation(f"psnr shape mismatch: {r.shape} vs {t.shape}")
    if data_range <= 0:
        raise ContractViolation("data_range must be positive")
    mse = float(np.mean((r - t) ** 2))
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation along the last two axes
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim_map(reference, test, data_range: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             k1: float = SSIM_K1, k2: float = SSIM_K2) -> np.ndarray:
    x, y = _arr(reference), _arr(test)
    if x.shape != y.shape:
        raise ContractViolation(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim < 2 or min(x.shape[-2:]) < window:
        raise ContractViolation(f"ssim needs spatial extents >= {window}, got {x.shape}")
    g = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(reference, test, data_range: float = 1.0, **params) -> float:
    """Mean local SSIM (Gaussian 11x11 window, sigma 1.5, K1=0.01, K2=0.03).

    Leading axes (batch, channel) are averaged together with the spatial map.
    """
    return float(np.mean(ssim_map(reference, test, data_range, **params)))


def composite_score(psnr_db: float, ssim_value: float) -> float:
    return psnr_db / 40.0 + ssim_value


def finite_mean(values, what: str = "PSNR") -> float:
    """Mean over finite entries; infinite PSNRs are dropped with a warning."""
    vals = [float(v) for v in values]
    finite = [v for v in vals if math.isfinite(v)]
    if len(finite) != len(vals):
        warnings.warn(f"{len(vals) - len(finite)} infinite {what} value(s) excluded from the mean", RuntimeWarning)
    if not finite:
        return PSNR_INFINITE
    return float(np.mean(finite))


@dataclass(frozen=True)
class MetricsRecord:
    image_id: str
    psnr_db: float
    ssim: float

    @property
    def est_score(self) -> float:
        return composite_score(self.psnr_db, self.ssim)


def evaluate_pair(image_id: str, reference, test, data_range: float = 1.0) -> MetricsRecord:
    return MetricsRecord(image_id, psnr(reference, test, data_range), ssim(reference, test, data_range))
