"""U-Net generators (standard, residual-dense, attention) and the PatchGAN critic.

Parameters live in plain ``dict[str, Tensor]`` maps (``ModelParams``); forward
passes are free functions of (params, config, input).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor

ModelParams = Dict[str, Tensor]

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5
INIT_STD = 0.02


class Variant(str, Enum):
    STANDARD = "standard_unet"
    RESPLUS = "resunet_plus"
    ATTENTION = "attention_unet"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        aliases = {
            "standard": cls.STANDARD, "unet": cls.STANDARD, "standard_unet": cls.STANDARD,
            "resunet": cls.RESPLUS, "resunet+": cls.RESPLUS, "resunet_plus": cls.RESPLUS,
            "attention": cls.ATTENTION, "attention_unet": cls.ATTENTION,
        }
        key = str(value).strip().lower().replace("-", "").replace(" ", "_")
        if key not in aliases:
            raise ContractViolation(f"unsupported generator variant: {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class GeneratorConfig:
    """``global_skip=False`` is score mode: the net emits its residual branch only."""

    variant: Variant = Variant.STANDARD
    ngf: int = 64
    depth: int = 4
    in_channels: int = 1
    out_channels: int = 1
    global_skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.ngf < 1 or self.depth < 1:
            raise ContractViolation(f"ngf and depth must be >= 1 (got {self.ngf}, {self.depth})")
        if self.in_channels != self.out_channels:
            raise ContractViolation("generator needs in_channels == out_channels for the residual addition")

    def width(self, level: int) -> int:
        return self.ngf * 2**level


@dataclass(frozen=True)
class DiscriminatorConfig:
    ndf: int = 64
    n_layers: int = 4
    kernel: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.ndf < 1 or self.n_layers < 1:
            raise ContractViolation(f"ndf and n_layers must be >= 1 (got {self.ndf}, {self.n_layers})")
        if self.kernel < 2:
            raise ContractViolation("discriminator kernel must be >= 2")

    def widths(self) -> list[int]:
        return [self.ndf * 2**i for i in range(self.n_layers)]

    def strides(self) -> list[int]:
        return [2] * (self.n_layers - 1) + [1]


# -- parameter layout ------------------------------------------------------------
def _conv(layout, name, cin, cout, k, bias=False):
    layout[f"{name}.weight"] = ((cout, cin, k, k), "normal")
    if bias:
        layout[f"{name}.bias"] = ((cout,), "zeros")


def _norm(layout, name, c):
    layout[f"{name}.gamma"] = ((c,), "ones")
    layout[f"{name}.beta"] = ((c,), "zeros")


def _body_layout(layout, name, cin, cout, variant):
    _conv(layout, f"{name}.c1", cin, cout, 3)
    _norm(layout, f"{name}.n1", cout)
    # residual-dense block: second conv sees [input, first activation]
    c2_in = cin + cout if variant is Variant.RESPLUS else cout
    _conv(layout, f"{name}.c2", c2_in, cout, 3)
    _norm(layout, f"{name}.n2", cout)
    if variant is Variant.RESPLUS and cin != cout:
        _conv(layout, f"{name}.proj", cin, cout, 1)


def _gate_layout(layout, name, c):
    inter = max(c // 2, 1)
    _conv(layout, f"{name}.wx", c, inter, 1)
    _conv(layout, f"{name}.wg", c, inter, 1, bias=True)
    _conv(layout, f"{name}.psi", inter, 1, 1, bias=True)


def generator_layout(cfg: GeneratorConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Ordered ``name -> (shape, init)`` for every generator parameter."""
    layout: dict = {}
    _body_layout(layout, "inc", cfg.in_channels, cfg.width(0), cfg.variant)
    for i in range(1, cfg.depth + 1):
        _conv(layout, f"down{i}.conv", cfg.width(i - 1), cfg.width(i), 3)
        _norm(layout, f"down{i}.norm", cfg.width(i))
        _body_layout(layout, f"enc{i}", cfg.width(i), cfg.width(i), cfg.variant)
    for i in range(cfg.depth, 0, -1):
        c = cfg.width(i - 1)
        _conv(layout, f"up{i}.conv", cfg.width(i), c, 3)
        _norm(layout, f"up{i}.norm", c)
        if cfg.variant is Variant.ATTENTION:
            _gate_layout(layout, f"ag{i}", c)
        _body_layout(layout, f"dec{i}", 2 * c, c, cfg.variant)
    _conv(layout, "out", cfg.width(0), cfg.out_channels, 1, bias=True)
    return layout


def discriminator_layout(cfg: DiscriminatorConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    layout: dict = {}
    cin = cfg.in_channels
    for i, c in enumerate(cfg.widths()):
        _conv(layout, f"layer{i}", cin, c, cfg.kernel, bias=(i == 0))
        if i > 0:
            _norm(layout, f"layer{i}.norm", c)
        cin = c
    _conv(layout, "out", cin, 1, cfg.kernel, bias=True)
    return layout


def _init_params(layout, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, (shape, kind) in layout.items():
        if kind == "normal":
            data = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        elif kind == "ones":
            data = np.ones(shape, dtype=np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def build_generator(cfg: GeneratorConfig, seed: int) -> ModelParams:
    return _init_params(generator_layout(cfg), seed)


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> ModelParams:
    return _init_params(discriminator_layout(cfg), seed)


def count_parameters(params: ModelParams) -> int:
    return sum(p.size for p in params.values())


def zero_params(params: ModelParams) -> ModelParams:
    """Copy of ``params`` with every entry set to 0 (gammas included)."""
    return {k: Tensor(np.zeros_like(v.data), requires_grad=v.requires_grad, name=k) for k, v in params.items()}


# -- forward passes ---------------------------------------------------------------
def _block(p, name, x, norm, stride=1, upsample=False):
    w = p[f"{name}.weight"]
    if upsample:
        h = T.upsample2x_conv(x, w)
    else:
        h = T.conv2d(x, w, stride=stride, padding=(w.shape[-1] - 1) // 2)
    h = T.instance_norm(h, p[f"{norm}.gamma"], p[f"{norm}.beta"], NORM_EPS)
    return T.leaky_relu(h, LEAKY_SLOPE)


def _body(p, name, x, variant):
    h1 = _block(p, f"{name}.c1", x, f"{name}.n1")
    if variant is not Variant.RESPLUS:
        return _block(p, f"{name}.c2", h1, f"{name}.n2")
    h2 = _block(p, f"{name}.c2", T.concat([x, h1], axis=1), f"{name}.n2")
    proj = p.get(f"{name}.proj.weight")
    skip = x if proj is None else T.conv2d(x, proj)
    return h2 + skip


def attention_gate(gate_signal: Tensor, skip_features: Tensor, params: ModelParams, prefix: str = "ag") -> Tensor:
    """Scale ``skip_features`` by sigmoid coefficients computed from both inputs.

    ``gate_signal`` is the decoder feature map at the skip's resolution.
    Parameters are read from ``{prefix}.wx.weight``, ``{prefix}.wg.weight/bias``
    and ``{prefix}.psi.weight/bias``.
    """
    if gate_signal.data.ndim != 4 or skip_features.data.ndim != 4:
        raise ContractViolation("attention_gate expects NCHW tensors")
    if gate_signal.shape[0] != skip_features.shape[0] or gate_signal.shape[2:] != skip_features.shape[2:]:
        raise ContractViolation(
            f"attention_gate spatial/batch mismatch: gate {gate_signal.shape} vs skip {skip_features.shape}"
        )
    return skip_features * attention_coefficients(gate_signal, skip_features, params, prefix)


def attention_coefficients(gate_signal: Tensor, skip_features: Tensor, params: ModelParams, prefix: str = "ag"):
    """Sigmoid gate map of shape N x 1 x H x W, values in [0, 1]."""
    theta = T.conv2d(skip_features, params[f"{prefix}.wx.weight"])
    phi = T.conv2d(gate_signal, params[f"{prefix}.wg.weight"], bias=params[f"{prefix}.wg.bias"])
    return T.sigmoid(T.conv2d(T.relu(theta + phi), params[f"{prefix}.psi.weight"], bias=params[f"{prefix}.psi.bias"]))


def residual_branch(params: ModelParams, cfg: GeneratorConfig, x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ContractViolation(f"generator expects N x {cfg.in_channels} x H x W input, got {x.shape}")
    h, w = x.shape[2:]
    factor = 2**cfg.depth
    if h % factor or w % factor:
        raise ContractViolation(
            f"input extents {h}x{w} must be divisible by 2**depth = {factor} (depth={cfg.depth}); "
            "crop or pad the image, or lower the depth"
        )
    p = params
    skips = [_body(p, "inc", x, cfg.variant)]
    feat = skips[0]
    for i in range(1, cfg.depth + 1):
        feat = _block(p, f"down{i}.conv", feat, f"down{i}.norm", stride=2)
        feat = _body(p, f"enc{i}", feat, cfg.variant)
        skips.append(feat)
    for i in range(cfg.depth, 0, -1):
        up = _block(p, f"up{i}.conv", feat, f"up{i}.norm", upsample=True)
        skip = skips[i - 1]
        if cfg.variant is Variant.ATTENTION:
            skip = attention_gate(up, skip, p, prefix=f"ag{i}")
        feat = _body(p, f"dec{i}", T.concat([skip, up], axis=1), cfg.variant)
    return T.conv2d(feat, p["out.weight"], bias=p["out.bias"])


def generator_forward(params: ModelParams, cfg: GeneratorConfig, x: Tensor) -> Tensor:
    """``x + residual(x)``, or just the residual branch in score mode."""
    r = residual_branch(params, cfg, x)
    return x + r if cfg.global_skip else r


def discriminator_output_extent(cfg: DiscriminatorConfig, size: int) -> list[int]:
    """Spatial extent after each layer (padding 1), the final score map last."""
    extents = []
    for s in cfg.strides() + [1]:
        size = (size + 2 - cfg.kernel) // s + 1
        if size < 1:
            raise ContractViolation(
                f"input too small for a {cfg.n_layers}-layer discriminator with kernel {cfg.kernel}"
            )
        extents.append(size)
    return extents


def discriminator_forward(params: ModelParams, cfg: DiscriminatorConfig, x: Tensor) -> Tensor:
    """Patch score map, one channel, raw (unbounded) values."""
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ContractViolation(f"discriminator expects N x {cfg.in_channels} x H x W input, got {x.shape}")
    discriminator_output_extent(cfg, min(x.shape[2:]))
    h = x
    for i, s in enumerate(cfg.strides()):
        name = f"layer{i}"
        h = T.conv2d(h, params[f"{name}.weight"], stride=s, padding=1, bias=params.get(f"{name}.bias"))
        if i > 0:
            h = T.instance_norm(h, params[f"{name}.norm.gamma"], params[f"{name}.norm.beta"], NORM_EPS)
        h = T.leaky_relu(h, LEAKY_SLOPE)
    return T.conv2d(h, params["out.weight"], stride=1, padding=1, bias=params["out.bias"])
