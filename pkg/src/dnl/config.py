"""Experiment config files: flat ``key = value`` lines in [data], [model],
[train] and [eval] sections.  Every key is validated before any work starts."""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .data import CorpusSpec, NoiseModel, parse_noise
from .errors import ContractViolation
from .nn import Variant
from .train import TrainConfig


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


def _opt_str(v: str):
    return None if v.strip().lower() in ("", "none") else v.strip()


def _method(v: str) -> str:
    if v not in ("cyclegan", "n2s"):
        raise ValueError("expected cyclegan or n2s")
    return v


def _variant(v: str) -> str:
    return Variant.parse(v).value


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


# section -> key -> spec; the README key table is generated from this
KEYS: dict[str, dict[str, Key]] = {
    "data": {
        "root": Key(str, "data", "corpus directory (relative paths resolve against the config file)"),
        "n_train": Key(int, 64, "phantoms per training domain (clean and noisy sets are disjoint)"),
        "n_test": Key(int, 16, "paired held-out phantoms"),
        "size": Key(int, 64, "phantom extent in pixels"),
        "n_ellipses": Key(int, 8, "ellipses per phantom"),
        "noise": Key(parse_noise, parse_noise("gaussian:0.0025"), "injected noise descriptor"),
        "calibrate_psnr": Key(_opt_float, None, "if set, tune gaussian sigma2 to this mean input PSNR (dB)"),
        "seed": Key(int, 0, "corpus seed"),
    },
    "model": {
        "method": Key(_method, "cyclegan", "cyclegan | n2s"),
        "variant": Key(_variant, "standard_unet", "standard_unet | resunet_plus | attention_unet"),
        "ngf": Key(int, 64, "generator base width"),
        "ndf": Key(int, 64, "discriminator base width"),
        "depth": Key(int, 4, "U-Net downsampling levels"),
        "n_layers": Key(int, 4, "discriminator conv layers before the score head"),
    },
    "train": {
        "lambda_cycle": Key(float, 30.0, "cycle-consistency weight"),
        "lambda_iden": Key(float, 2.0, "identity weight"),
        "lr_g": Key(float, 1e-4, "generator / score-network learning rate"),
        "lr_d": Key(float, 2e-4, "discriminator learning rate"),
        "beta1": Key(float, 0.5, "Adam beta1"),
        "beta2": Key(float, 0.999, "Adam beta2"),
        "epochs": Key(int, 100, "training epochs"),
        "decay_start": Key(int, 100, "epoch where linear LR decay to 0 begins"),
        "batch_size": Key(int, 4, "images per step"),
        "patch": Key(int, 64, "random crop extent"),
        "delta": Key(float, 0.1, "std of the AR-DAE perturbation scale law"),
        "noise": Key(_opt_str, None, "assumed noise model; defaults to the training manifest's"),
        "seed": Key(int, 0, "training seed"),
        "checkpoint_every": Key(int, 1, "epochs between checkpoint writes"),
        "manifest": Key(_opt_str, None, "training manifest; defaults to <root>/train.manifest"),
        "runs": Key(str, "runs", "parent directory for run directories"),
    },
    "eval": {
        "manifest": Key(_opt_str, None, "paired evaluation manifest; defaults to <root>/test.manifest"),
        "data_range": Key(float, 1.0, "PSNR/SSIM dynamic range"),
    },
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(os.path.normpath(self.base_dir / p))

    @property
    def data_root(self) -> Path:
        return self.path(self["data"]["root"])

    def corpus_spec(self, noise: NoiseModel | None = None) -> CorpusSpec:
        d = self["data"]
        return CorpusSpec(d["n_train"], d["n_test"], d["size"], d["n_ellipses"], noise or d["noise"], d["seed"])

    def train_manifest(self) -> Path:
        m = self["train"]["manifest"]
        return self.path(m) if m else self.data_root / "train.manifest"

    def eval_manifest(self) -> Path:
        m = self["eval"]["manifest"]
        return self.path(m) if m else self.data_root / "test.manifest"

    def train_config(self, noise: NoiseModel, seed: int | None = None) -> TrainConfig:
        m, t = self["model"], self["train"]
        return TrainConfig(
            method=m["method"], variant=m["variant"], ngf=m["ngf"], ndf=m["ndf"], depth=m["depth"],
            n_layers=m["n_layers"], lambda_cycle=t["lambda_cycle"], lambda_iden=t["lambda_iden"],
            lr_g=t["lr_g"], lr_d=t["lr_d"], beta1=t["beta1"], beta2=t["beta2"], epochs=t["epochs"],
            decay_start=t["decay_start"], batch_size=t["batch_size"], patch=t["patch"], delta=t["delta"],
            noise=noise, seed=t["seed"] if seed is None else seed, checkpoint_every=t["checkpoint_every"],
        )


def defaults() -> dict[str, dict[str, Any]]:
    return {s: {k: spec.default for k, spec in keys.items()} for s, keys in KEYS.items()}


def parse_config_text(text: str, base_dir=".", overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    """Parse config text; ``overrides`` are raw strings applied on top.  All
    problems are collected and raised together as one ContractViolation."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ContractViolation(f"config syntax error: {exc}") from None
    raw: dict[str, dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for s, kv in (overrides or {}).items():
        raw.setdefault(s, {}).update(kv)
    values = defaults()
    problems = []
    for section, kv in raw.items():
        if section not in KEYS:
            problems.append(f"unknown section [{section}]")
            continue
        for key, text_value in kv.items():
            spec = KEYS[section].get(key)
            if spec is None:
                problems.append(f"unknown key {section}.{key}")
                continue
            try:
                values[section][key] = spec.parse(text_value)
            except (ValueError, ContractViolation) as exc:
                problems.append(f"bad value for {section}.{key} = {text_value!r}: {exc}")
    if problems:
        raise ContractViolation("invalid config: " + "; ".join(problems))
    cfg = ExperimentConfig(values, Path(base_dir))
    # eager validation of the derived training config
    if cfg["train"]["noise"] is not None:
        parse_noise(cfg["train"]["noise"])
    cfg.train_config(cfg["data"]["noise"])
    return cfg


def load_config(path, overrides=None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    return parse_config_text(path.read_text(), path.parent.resolve(), overrides)


def config_hash(cfg: TrainConfig, manifest_bytes: bytes = b"") -> str:
    """Short content hash of everything that shapes a run except the seed."""
    d = cfg.to_dict()
    d.pop("seed")
    h = hashlib.sha256(json.dumps(d, sort_keys=True).encode())
    h.update(hashlib.sha256(manifest_bytes).digest())
    return h.hexdigest()[:10]
