"""Finite-difference gradient oracle used across the test-suite.

Everything runs in float64.  Relative error is measured in the max norm:
``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.

Piecewise-linear ops (leaky_relu, abs) have kinks where a central difference
is meaningless.  ``kink_guard`` records the sign pattern of every kinked
input during a forward pass; a perturbation whose +h or -h evaluation changes
that pattern straddles a kink and is excluded from the comparison.
"""
from __future__ import annotations

import contextlib

import numpy as np

import dnl.tensor as T
from dnl.tensor import Tensor

H = 1e-3


class _KinkRecorder:
    def __init__(self):
        self.patterns: list[np.ndarray] = []
        self.active = False

    def snapshot(self, fn, *arrays):
        self.patterns = []
        self.active = True
        try:
            value = fn(*arrays)
        finally:
            self.active = False
        return value, [p.copy() for p in self.patterns]


_recorder = _KinkRecorder()


@contextlib.contextmanager
def kink_guard():
    orig_leaky, orig_abs = T.leaky_relu, T.abs_

    def leaky(a, slope=0.2):
        if _recorder.active:
            _recorder.patterns.append(a.data > 0)
        return orig_leaky(a, slope)

    def abs_(a):
        if _recorder.active:
            _recorder.patterns.append(np.sign(a.data))
        return orig_abs(a)

    T.leaky_relu, T.abs_ = leaky, abs_
    try:
        yield
    finally:
        T.leaky_relu, T.abs_ = orig_leaky, orig_abs


def _same(p, q):
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


def scalar_fn(build):
    """Wrap ``build(*Tensors) -> scalar Tensor`` as ``f(*ndarrays) -> float``."""

    def f(*arrays):
        return build(*(Tensor(a) for a in arrays)).item()

    return f


def numeric_grads(build, arrays, h=H, wrt=None, sample=None, seed=0):
    """Central differences for each array in ``wrt`` (default: all).

    With ``sample=n`` only ``n`` random coordinates per array are perturbed;
    the rest are masked out.  Returns ``(grads, valid_masks, n_sampled)``;
    ``valid_masks[k]`` is False where the perturbation crossed a kink or was
    not sampled.
    """
    f = scalar_fn(build)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    grads, masks, sampled = {}, {}, {}
    pick = np.random.default_rng(seed)
    with kink_guard():
        _, base = _recorder.snapshot(f, *arrays)
        for k in wrt:
            x = arrays[k]
            g = np.zeros_like(x)
            ok = np.ones(x.shape, dtype=bool)
            coords = list(np.ndindex(x.shape))
            if sample is not None and sample < len(coords):
                ok[:] = False
                coords = [coords[i] for i in pick.choice(len(coords), sample, replace=False)]
                for idx in coords:
                    ok[idx] = True
            for idx in coords:
                orig = x[idx]
                x[idx] = orig + h
                fp, pp = _recorder.snapshot(f, *arrays)
                x[idx] = orig - h
                fm, pm = _recorder.snapshot(f, *arrays)
                x[idx] = orig
                g[idx] = (fp - fm) / (2 * h)
                ok[idx] = _same(pp, base) and _same(pm, base)
            grads[k], masks[k] = g, ok
            sampled[k] = len(coords)
    return grads, masks, sampled


def analytic_grads(build, arrays):
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build(*ts)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_error(analytic, numeric, mask=None):
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if mask is not None:
        a, n = a[mask], n[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def gradient_report(build, arrays, h=H, wrt=None, sample=None, seed=0):
    """``(max relative error, n_excluded, n_checked)`` over the checked arrays."""
    ana = analytic_grads(build, arrays)
    num, masks, sampled = numeric_grads(build, arrays, h, wrt, sample, seed)
    worst, checked, kept = 0.0, 0, 0
    for k in num:
        checked += sampled[k]
        kept += int(masks[k].sum())
        worst = max(worst, rel_error(ana[k], num[k], masks[k]))
    return worst, checked - kept, checked


def check_gradients(build, arrays, h=H, wrt=None, max_excluded=0.05, sample=None, seed=0):
    """Max relative error over all checked arrays (kink-straddling entries excluded)."""
    worst, excluded, checked = gradient_report(build, arrays, h, wrt, sample, seed)
    assert excluded <= max_excluded * checked, f"{excluded}/{checked} checked entries straddle a kink"
    return worst
