"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; the graph is recorded only when at
least one input requires a gradient.  Values default to float32.  Reductions
accumulate in float64 and cast back.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractViolation, NumericError

DEFAULT_DTYPE = np.float32

_BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: _BackwardFn | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ContractViolation(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: _BackwardFn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2 * g * ad,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is ``slope``."""
    if not 0 <= slope < 1:
        raise ContractViolation(f"leaky_relu slope must be in [0, 1), got {slope}")
    x = a.data
    pos = x > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype, copy=False)
    return _result(x * scale, (a,), lambda g: (g * scale,))


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


# -- reductions / shape --------------------------------------------------------
def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    if n == 0:
        raise ContractViolation("mean of an empty tensor")
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=dtype)
    return _result(out, (a,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- convolution -----------------------------------------------------------------
def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of NCHW input with an OIKK kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractViolation(f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ContractViolation(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if kh != kw:
        raise ContractViolation(f"conv2d needs square kernels, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ContractViolation(f"conv2d needs stride >= 1 and padding >= 0 (got {stride}, {padding})")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractViolation(f"conv2d input {h}x{wd} too small for kernel {k} with padding {padding}")
    if bias is not None and bias.shape != (o,):
        raise ContractViolation(f"conv2d bias must have shape ({o},), got {bias.shape}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    xp = np.ascontiguousarray(xp)
    hp, wp = xp.shape[2], xp.shape[3]
    s = xp.strides
    # columns laid out (c, ki, kj) x (n, ho, wo): the col2im source slices stay contiguous
    cols = as_strided(
        xp,
        shape=(c, k, k, n, ho, wo),
        strides=(s[1], s[2], s[3], s[0], s[2] * stride, s[3] * stride),
        writeable=False,
    ).reshape(c * k * k, n * ho * wo)
    wmat = w.data.reshape(o, c * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    _check_finite(out, "conv2d")

    need_x, need_w = x.requires_grad, w.requires_grad

    def backward(g):
        gT = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (gT @ cols.T).reshape(w.shape) if need_w else None
        gb = gT.sum(axis=1, dtype=np.float64).astype(g.dtype) if bias is not None else None
        gx = None
        if need_x:
            dcols = (wmat.T @ gT).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of the two spatial axes."""
    if x.data.ndim != 4:
        raise ContractViolation(f"upsample2x expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ContractViolation("upsample2x needs spatial extents >= 1")
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def upsample2x_conv(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Nearest-neighbour x2 upsample followed by a 'same' stride-1 convolution."""
    k = w.shape[-1]
    if k % 2 != 1:
        raise ContractViolation(f"upsample2x_conv needs an odd kernel, got {k}")
    return conv2d(upsample2x(x), w, stride=1, padding=(k - 1) // 2, bias=bias)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(n, c) plane standardisation followed by a per-channel affine map."""
    if eps <= 0:
        raise ContractViolation("instance_norm eps must be > 0")
    if x.data.ndim != 4:
        raise ContractViolation(f"instance_norm expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractViolation(f"instance_norm gamma/beta must have shape ({c},)")
    xd = x.data
    dtype = xd.dtype
    mean = xd.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    xc = xd - mean.astype(dtype)
    var = np.mean(np.square(xc), axis=(2, 3), keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = xc * inv
    gmm = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gmm + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
        gx = None
        if x.requires_grad:
            dxhat = g * gmm
            m1 = dxhat.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(dtype)
            m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(dtype)
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward)


def parameters_require_grad(params: Iterable[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
