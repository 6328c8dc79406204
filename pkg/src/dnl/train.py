"""CycleGAN and Noise2Score (AR-DAE) training loops.

All randomness is derived from ``cfg.seed`` plus the epoch/step index, so a
run resumed from a checkpoint replays exactly the batches, patches and noise
draws of an uninterrupted run.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from .data import DatasetManifest, NoiseModel, Poisson, load_domain, parse_noise, rng_for, derive_seed
from .errors import ContractViolation, NumericError
from .io import load_checkpoint, save_checkpoint
from .nn import (
    DiscriminatorConfig,
    GeneratorConfig,
    ModelParams,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
)
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .tensor import Tensor, parameters_require_grad

log = logging.getLogger(__name__)

CYCLEGAN_COMPONENTS = ("adv_F", "adv_Q", "cyc_F", "cyc_Q", "idn_F", "idn_Q", "d_F", "d_Q")
N2S_COMPONENTS = ("loss",)
CYCLEGAN_NETS = ("g_f2q", "g_q2f", "d_f", "d_q")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "cyclegan"
    variant: str = "standard_unet"
    ngf: int = 64
    ndf: int = 64
    depth: int = 4
    n_layers: int = 4
    lambda_cycle: float = 30.0
    lambda_iden: float = 2.0
    lr_g: float = 1e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 100
    decay_start: int = 100
    batch_size: int = 4
    patch: int = 64
    delta: float = 0.1
    noise: NoiseModel = field(default_factory=lambda: Poisson(0.01))
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if isinstance(self.noise, str):
            object.__setattr__(self, "noise", parse_noise(self.noise))
        if self.method not in ("cyclegan", "n2s"):
            raise ContractViolation(f"method must be 'cyclegan' or 'n2s', got {self.method!r}")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ContractViolation("learning rates must be positive")
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        if not 0 <= self.decay_start <= self.epochs:
            raise ContractViolation("decay_start must lie in [0, epochs]")
        if self.batch_size < 1 or self.patch < 1 or self.checkpoint_every < 1:
            raise ContractViolation("batch_size, patch and checkpoint_every must be >= 1")
        if self.method == "n2s" and not self.delta > 0:
            raise ContractViolation("delta must be > 0 for Noise2Score")
        L.LossWeights(self.lambda_cycle, self.lambda_iden)

    # presets --------------------------------------------------------------
    @classmethod
    def sweep_preset(cls, **overrides) -> "TrainConfig":
        """Configuration-sweep settings: lr 2e-4 for both nets, 100 epochs, no decay."""
        base = dict(lr_g=2e-4, lr_d=2e-4, epochs=100, decay_start=100, lambda_cycle=30.0, lambda_iden=2.0)
        return cls(**{**base, **overrides})

    @classmethod
    def final_preset(cls, **overrides) -> "TrainConfig":
        """Long-schedule CycleGAN run.  lambda_iden defaults to 1 here although
        the selected sweep configuration used 2; pass either."""
        base = dict(lr_g=1e-4, lr_d=2e-4, epochs=1000, decay_start=100, lambda_cycle=30.0, lambda_iden=1.0)
        return cls(**{**base, **overrides})

    @classmethod
    def n2s_preset(cls, **overrides) -> "TrainConfig":
        """Noise2Score settings: zeta 0.01, 100 epochs, lr 4e-4 (1e-4 is also plausible; set lr_g to override)."""
        base = dict(method="n2s", lr_g=4e-4, epochs=100, decay_start=100, noise=Poisson(0.01))
        return cls(**{**base, **overrides})

    # derived --------------------------------------------------------------
    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(variant=self.variant, ngf=self.ngf, depth=self.depth,
                               global_skip=self.method == "cyclegan")

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(ndf=self.ndf, n_layers=self.n_layers)

    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda_cycle, self.lambda_iden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = self.noise.descriptor()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochReport:
    epoch: int  # 1-based
    lr: float
    losses: dict[str, float]

    def row(self, components) -> list:
        return [self.epoch, repr(self.lr)] + [repr(self.losses[c]) for c in components]


@dataclass
class CycleGanState:
    nets: dict[str, ModelParams]
    opt: dict[str, AdamState]
    epoch: int = 0
    history: dict[str, list[float]] = field(default_factory=lambda: {c: [] for c in CYCLEGAN_COMPONENTS})
    reports: list[EpochReport] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.history["adv_F"])


@dataclass
class N2sState:
    params: ModelParams
    opt: AdamState
    epoch: int = 0
    history: list[float] = field(default_factory=list)
    reports: list[EpochReport] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.history)


# -- initialisation ------------------------------------------------------------------
def init_cyclegan(cfg: TrainConfig) -> CycleGanState:
    gcfg, dcfg = cfg.generator_config(), cfg.discriminator_config()
    nets = {
        "g_f2q": build_generator(gcfg, derive_seed(cfg.seed, "init", "g_f2q")),
        "g_q2f": build_generator(gcfg, derive_seed(cfg.seed, "init", "g_q2f")),
        "d_f": build_discriminator(dcfg, derive_seed(cfg.seed, "init", "d_f")),
        "d_q": build_discriminator(dcfg, derive_seed(cfg.seed, "init", "d_q")),
    }
    opt = {k: AdamState.for_params(list(v.values()), cfg.beta1, cfg.beta2) for k, v in nets.items()}
    return CycleGanState(nets, opt)


def init_n2s(cfg: TrainConfig) -> N2sState:
    params = build_generator(cfg.generator_config(), derive_seed(cfg.seed, "init", "r_theta"))
    return N2sState(params, AdamState.for_params(list(params.values()), cfg.beta1, cfg.beta2))


# -- single steps -------------------------------------------------------------------------
def _finite_or_raise(values: dict[str, float]) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss component {name!r} = {v}")


def _named(component: str, fn):
    try:
        return fn()
    except NumericError as exc:
        raise NumericError(f"loss component {component!r}: {exc}") from exc


def _update(params: ModelParams, state: AdamState, lr: float) -> None:
    ps = list(params.values())
    adam_step(ps, [p.grad for p in ps], state, lr)
    for p in ps:
        p.grad = None


def cyclegan_step(state: CycleGanState, batch_F: Tensor, batch_Q: Tensor, cfg: TrainConfig,
                  lr_g: float | None = None, lr_d: float | None = None) -> dict[str, float]:
    """One generator update followed by one discriminator update."""
    if batch_F.shape != batch_Q.shape:
        raise ContractViolation(f"domain batches differ in shape: {batch_F.shape} vs {batch_Q.shape}")
    lr_g = cfg.lr_g if lr_g is None else lr_g
    lr_d = cfg.lr_d if lr_d is None else lr_d
    gcfg, dcfg, w = cfg.generator_config(), cfg.discriminator_config(), cfg.weights()
    n = state.nets
    g_params = list(n["g_f2q"].values()) + list(n["g_q2f"].values())
    d_params = list(n["d_f"].values()) + list(n["d_q"].values())
    x_F, x_Q = Tensor(batch_F.data), Tensor(batch_Q.data)

    def G(name, x):
        return generator_forward(n[name], gcfg, x)

    def D(name, x):
        return discriminator_forward(n[name], dcfg, x)

    # generators
    parameters_require_grad(d_params, False)
    try:
        fake_F = _named("g_q2f forward", lambda: G("g_q2f", x_Q))
        fake_Q = _named("g_f2q forward", lambda: G("g_f2q", x_F))
        terms = {
            "adv_F": _named("adv_F", lambda: L.lsgan_g_loss(D("d_f", fake_F))),
            "adv_Q": _named("adv_Q", lambda: L.lsgan_g_loss(D("d_q", fake_Q))),
            "cyc_F": _named("cyc_F", lambda: L.l1_loss(G("g_q2f", fake_Q), x_F)),
            "cyc_Q": _named("cyc_Q", lambda: L.l1_loss(G("g_f2q", fake_F), x_Q)),
            "idn_F": _named("idn_F", lambda: L.l1_loss(G("g_q2f", x_F), x_F)),
            "idn_Q": _named("idn_Q", lambda: L.l1_loss(G("g_f2q", x_Q), x_Q)),
        }
        values = {k: v.item() for k, v in terms.items()}
        _finite_or_raise(values)
        total = L.generator_total(*(terms[k] for k in CYCLEGAN_COMPONENTS[:6]), w)
        for p in g_params:
            p.grad = None
        total.backward()
        _update(n["g_f2q"], state.opt["g_f2q"], lr_g)
        _update(n["g_q2f"], state.opt["g_q2f"], lr_g)
    finally:
        parameters_require_grad(d_params, True)

    # discriminators, on fakes detached from the generator graph
    parameters_require_grad(g_params, False)
    try:
        fF, fQ = fake_F.detach(), fake_Q.detach()
        d_F = _named("d_F", lambda: L.discriminator_total(L.lsgan_d_loss(D("d_f", x_F), D("d_f", fF))))
        d_Q = _named("d_Q", lambda: L.discriminator_total(L.lsgan_d_loss(D("d_q", x_Q), D("d_q", fQ))))
        values["d_F"], values["d_Q"] = d_F.item(), d_Q.item()
        _finite_or_raise({"d_F": values["d_F"], "d_Q": values["d_Q"]})
        for p in d_params:
            p.grad = None
        (d_F + d_Q).backward()
        _update(n["d_f"], state.opt["d_f"], lr_d)
        _update(n["d_q"], state.opt["d_q"], lr_d)
    finally:
        parameters_require_grad(g_params, True)

    for k in CYCLEGAN_COMPONENTS:
        state.history[k].append(values[k])
    return {k: values[k] for k in CYCLEGAN_COMPONENTS}


def n2s_step(state: N2sState, batch_y: Tensor, cfg: TrainConfig, lr: float | None = None) -> float:
    """One AR-DAE update; u and sigma_a are drawn once for the whole batch."""
    lr = cfg.lr_g if lr is None else lr
    rng = rng_for(cfg.seed, "n2s-step", state.steps)
    y = batch_y.data
    u = rng.standard_normal(y.shape).astype(y.dtype)
    sigma_a = float(rng.normal(0.0, cfg.delta))
    y_tilde = Tensor((y + sigma_a * u).astype(y.dtype))
    loss = _named("loss", lambda: L.ardae_loss(Tensor(u), sigma_a,
                                               generator_forward(state.params, cfg.generator_config(), y_tilde)))
    value = loss.item()
    _finite_or_raise({"loss": value})
    for p in state.params.values():
        p.grad = None
    loss.backward()
    _update(state.params, state.opt, lr)
    state.history.append(value)
    return value


# -- batching -----------------------------------------------------------------------------
def make_batch(images: np.ndarray, indices, patch: int, *seed_parts) -> Tensor:
    """Stack aligned random ``patch`` crops of the selected images."""
    h, w = images.shape[-2:]
    if patch > h or patch > w:
        raise ContractViolation(f"patch {patch} larger than images {h}x{w}")
    crops = []
    for j, i in enumerate(indices):
        rng = rng_for(*seed_parts, j)
        top = int(rng.integers(0, h - patch + 1))
        left = int(rng.integers(0, w - patch + 1))
        crops.append(images[i, :, top : top + patch, left : left + patch])
    return Tensor(np.ascontiguousarray(np.stack(crops)))


# -- persistence ---------------------------------------------------------------------------
def _adam_meta(s: AdamState) -> dict:
    return {"step_count": s.step_count, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}


def _pack_net(prefix: str, params: ModelParams, opt: AdamState, out: dict) -> None:
    for (name, p), m, v in zip(params.items(), opt.first_moment, opt.second_moment):
        out[f"{prefix}/param/{name}"] = p.data
        out[f"{prefix}/adam_m/{name}"] = m
        out[f"{prefix}/adam_v/{name}"] = v


def _unpack_net(prefix: str, template: ModelParams, tensors: dict, meta: dict) -> tuple[ModelParams, AdamState]:
    params, m, v = {}, [], []
    for name, p in template.items():
        key = f"{prefix}/param/{name}"
        if key not in tensors:
            raise ContractViolation(f"checkpoint lacks parameter {key}")
        arr = tensors[key]
        if arr.shape != p.shape:
            raise ContractViolation(f"checkpoint parameter {key} has shape {arr.shape}, expected {p.shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        m.append(tensors[f"{prefix}/adam_m/{name}"].copy())
        v.append(tensors[f"{prefix}/adam_v/{name}"].copy())
    return params, AdamState(m, v, **meta)


def _reports_meta(reports: list[EpochReport]) -> list[dict]:
    return [{"epoch": r.epoch, "lr": r.lr, "losses": r.losses} for r in reports]


def save_cyclegan(path, state: CycleGanState, cfg: TrainConfig) -> None:
    tensors: dict[str, np.ndarray] = {}
    for k in CYCLEGAN_NETS:
        _pack_net(k, state.nets[k], state.opt[k], tensors)
    meta = {
        "kind": "cyclegan",
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "adam": {k: _adam_meta(state.opt[k]) for k in CYCLEGAN_NETS},
        "history": state.history,
        "reports": _reports_meta(state.reports),
    }
    save_checkpoint(path, tensors, meta)


def save_n2s(path, state: N2sState, cfg: TrainConfig) -> None:
    tensors: dict[str, np.ndarray] = {}
    _pack_net("r_theta", state.params, state.opt, tensors)
    meta = {
        "kind": "n2s",
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "adam": {"r_theta": _adam_meta(state.opt)},
        "history": state.history,
        "reports": _reports_meta(state.reports),
    }
    save_checkpoint(path, tensors, meta)


def load_state(path):
    """Return ``(state, cfg)`` for either kind of checkpoint."""
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    reports = [EpochReport(r["epoch"], r["lr"], r["losses"]) for r in meta.get("reports", [])]
    if meta.get("kind") == "cyclegan":
        fresh = init_cyclegan(cfg)
        nets, opt = {}, {}
        for k in CYCLEGAN_NETS:
            nets[k], opt[k] = _unpack_net(k, fresh.nets[k], tensors, meta["adam"][k])
        state = CycleGanState(nets, opt, meta["epoch"], {k: list(v) for k, v in meta["history"].items()}, reports)
    elif meta.get("kind") == "n2s":
        fresh = init_n2s(cfg)
        params, opt = _unpack_net("r_theta", fresh.params, tensors, meta["adam"]["r_theta"])
        state = N2sState(params, opt, meta["epoch"], list(meta["history"]), reports)
    else:
        raise ContractViolation(f"unknown checkpoint kind {meta.get('kind')!r} in {path}")
    return state, cfg


def write_loss_csv(path, reports: list[EpochReport], components) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", *components])
        for r in reports:
            writer.writerow(r.row(components))


# -- epoch loops ------------------------------------------------------------------------------
ProgressFn = Callable[[EpochReport], None]


def _finish_epoch(state, cfg, out_dir, report, components, saver, keep_checkpoints, final):
    state.epoch = report.epoch
    state.reports.append(report)
    if out_dir is None:
        return
    out = Path(out_dir)
    write_loss_csv(out / "losses.csv", state.reports, components)
    if final or report.epoch % cfg.checkpoint_every == 0:
        saver(out / "checkpoint.ckpt", state, cfg)
    if keep_checkpoints:
        saver(out / f"epoch_{report.epoch:04d}.ckpt", state, cfg)


def train_cyclegan(cfg: TrainConfig, data: DatasetManifest, out_dir=None, resume=None,
                   stop_after: int | None = None, keep_checkpoints: bool = False,
                   progress: ProgressFn | None = None) -> tuple[CycleGanState, list[EpochReport]]:
    """Run (or continue) CycleGAN training up to ``cfg.epochs``.

    ``stop_after`` halts after that many completed epochs, as an interrupted
    run would; ``resume`` is a checkpoint path to continue from.
    """
    if not data.unpaired:
        log.warning("CycleGAN trainer given a paired manifest; pairings are ignored")
    F = load_domain(data.clean_paths())
    Q = load_domain(data.noisy_paths())
    steps = min(len(F), len(Q)) // cfg.batch_size
    if steps < 1:
        raise ContractViolation(f"need at least batch_size={cfg.batch_size} images per domain")
    if resume is not None:
        state, saved = load_state(resume)
        if saved.method != "cyclegan":
            raise ContractViolation("resume checkpoint is not a CycleGAN run")
    else:
        state = init_cyclegan(cfg)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    sched_g = LrSchedule(cfg.lr_g, cfg.decay_start, cfg.epochs)
    sched_d = LrSchedule(cfg.lr_d, cfg.decay_start, cfg.epochs)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(state.epoch, last):
        lr_g, lr_d = lr_at(epoch, sched_g), lr_at(epoch, sched_d)
        rng = rng_for(cfg.seed, "cyclegan-epoch", epoch)
        perm_F, perm_Q = rng.permutation(len(F)), rng.permutation(len(Q))
        sums = dict.fromkeys(CYCLEGAN_COMPONENTS, 0.0)
        for s in range(steps):
            sl = slice(s * cfg.batch_size, (s + 1) * cfg.batch_size)
            bF = make_batch(F, perm_F[sl], cfg.patch, cfg.seed, "patch-F", epoch, s)
            bQ = make_batch(Q, perm_Q[sl], cfg.patch, cfg.seed, "patch-Q", epoch, s)
            for k, v in cyclegan_step(state, bF, bQ, cfg, lr_g, lr_d).items():
                sums[k] += v
        report = EpochReport(epoch + 1, lr_g, {k: v / steps for k, v in sums.items()})
        _finish_epoch(state, cfg, out_dir, report, CYCLEGAN_COMPONENTS, save_cyclegan, keep_checkpoints,
                      final=epoch + 1 == last)
        log.info("cyclegan epoch %d: %s", report.epoch, report.losses)
        if progress:
            progress(report)
    return state, state.reports


def train_n2s(cfg: TrainConfig, data: DatasetManifest, out_dir=None, resume=None,
              stop_after: int | None = None, keep_checkpoints: bool = False,
              progress: ProgressFn | None = None) -> tuple[N2sState, list[EpochReport]]:
    """AR-DAE training on the noisy images of ``data`` only."""
    Y = load_domain(data.noisy_paths())
    steps = len(Y) // cfg.batch_size
    if steps < 1:
        raise ContractViolation(f"need at least batch_size={cfg.batch_size} noisy images")
    if resume is not None:
        state, saved = load_state(resume)
        if saved.method != "n2s":
            raise ContractViolation("resume checkpoint is not a Noise2Score run")
    else:
        state = init_n2s(cfg)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    sched = LrSchedule(cfg.lr_g, cfg.decay_start, cfg.epochs)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(state.epoch, last):
        lr = lr_at(epoch, sched)
        perm = rng_for(cfg.seed, "n2s-epoch", epoch).permutation(len(Y))
        total = 0.0
        for s in range(steps):
            batch = make_batch(Y, perm[s * cfg.batch_size : (s + 1) * cfg.batch_size], cfg.patch,
                               cfg.seed, "patch-Y", epoch, s)
            total += n2s_step(state, batch, cfg, lr)
        report = EpochReport(epoch + 1, lr, {"loss": total / steps})
        _finish_epoch(state, cfg, out_dir, report, N2S_COMPONENTS, save_n2s, keep_checkpoints,
                      final=epoch + 1 == last)
        log.info("n2s epoch %d: loss %.5f", report.epoch, report.losses["loss"])
        if progress:
            progress(report)
    return state, state.reports

