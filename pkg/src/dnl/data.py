"""Synthetic phantoms, noise injection, patch sampling and dataset manifests."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .errors import ContractViolation, ManifestError, MissingFileError, PairingAccessError
from .io import load_slice, save_slice
from .tensor import Tensor

log = logging.getLogger(__name__)


def derive_seed(*parts) -> int:
    """Mix ints/strings into one 63-bit seed via ``numpy.random.SeedSequence``.

    Strings are folded in through their UTF-8 bytes so the result is stable
    across processes (no ``hash()`` randomisation).
    """
    words: list[int] = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode("utf-8"))
            words.append(0x1F)
        else:
            words.append(int(p) & 0xFFFFFFFF)
            words.append((int(p) >> 32) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


# -- noise models ------------------------------------------------------------------
@dataclass(frozen=True)
class Gaussian:
    sigma2: float
    rho = 0

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ContractViolation(f"Gaussian sigma2 must be >= 0, got {self.sigma2}")

    @property
    def phi(self) -> float:
        return self.sigma2

    def descriptor(self) -> str:
        return f"gaussian:{self.sigma2!r}"


@dataclass(frozen=True)
class Poisson:
    zeta: float
    rho = 1

    def __post_init__(self):
        if not self.zeta > 0:
            raise ContractViolation(f"Poisson zeta must be > 0, got {self.zeta}")

    @property
    def phi(self) -> float:
        return self.zeta

    def descriptor(self) -> str:
        return f"poisson:{self.zeta!r}"


@dataclass(frozen=True)
class Gamma:
    alpha: float
    rho = 2

    def __post_init__(self):
        # the Tweedie denominator (alpha - 1) must be positive at zero score
        if not self.alpha > 1:
            raise ContractViolation(f"Gamma alpha must be > 1, got {self.alpha}")

    @property
    def phi(self) -> float:
        return 1.0 / self.alpha

    def descriptor(self) -> str:
        return f"gamma:{self.alpha!r}"


NoiseModel = Union[Gaussian, Poisson, Gamma]


def parse_noise(descriptor: str) -> NoiseModel:
    """Parse ``gaussian:<sigma2>`` | ``poisson:<zeta>`` | ``gamma:<alpha>``."""
    kind, sep, value = descriptor.strip().partition(":")
    if not sep:
        raise ContractViolation(f"noise descriptor needs '<kind>:<value>', got {descriptor!r}")
    try:
        v = float(value)
    except ValueError:
        raise ContractViolation(f"bad noise parameter in {descriptor!r}") from None
    if not math.isfinite(v):
        raise ContractViolation(f"noise parameter must be finite in {descriptor!r}")
    kinds = {"gaussian": Gaussian, "poisson": Poisson, "gamma": Gamma}
    if kind.lower() not in kinds:
        raise ContractViolation(f"unknown noise kind {kind!r} (expected gaussian, poisson or gamma)")
    return kinds[kind.lower()](v)


def inject_noise(clean: Tensor, model: NoiseModel, seed: int) -> Tensor:
    """Corrupt ``clean`` with the given noise model.

    Gaussian adds N(0, sigma2); Poisson returns zeta * Poisson(clean / zeta);
    Gamma multiplies by Gamma(shape=alpha, rate=alpha), which has unit mean.
    """
    x = clean.data.astype(np.float64)
    rng = np.random.default_rng(seed)
    if isinstance(model, Gaussian):
        if model.sigma2 == 0:
            return Tensor(clean.data.copy())
        y = x + rng.normal(0.0, math.sqrt(model.sigma2), size=x.shape)
    elif isinstance(model, (Poisson, Gamma)):
        if (x < 0).any():
            raise ContractViolation(f"{type(model).__name__} noise needs non-negative input")
        if isinstance(model, Poisson):
            y = model.zeta * rng.poisson(x / model.zeta)
        else:
            y = x * rng.gamma(shape=model.alpha, scale=1.0 / model.alpha, size=x.shape)
    else:
        raise ContractViolation(f"unsupported noise model {model!r}")
    return Tensor(y.astype(np.float32))


# -- phantoms --------------------------------------------------------------------------
@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    n_ellipses: int = 8
    seed: int = 0
    background: float = 0.0

    def __post_init__(self):
        if self.size < 1 or self.n_ellipses < 0:
            raise ContractViolation("phantom size must be >= 1 and n_ellipses >= 0")
        if not 0.0 <= self.background <= 1.0:
            raise ContractViolation("phantom background must lie in [0, 1]")


def synth_phantom(spec: PhantomSpec) -> Tensor:
    """Random Shepp-Logan-style slice, shape (1, 1, size, size), values in [0, 1].

    The first ellipse is a large body outline; later ones are smaller additive
    inserts of either sign, giving overlapping regions with hard edges.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.full((n, n), spec.background, dtype=np.float64)
    for i in range(spec.n_ellipses):
        if i == 0:
            cx, cy = rng.uniform(-0.08, 0.08, size=2)
            a, b = rng.uniform(0.65, 0.92, size=2)
            value = rng.uniform(0.35, 0.6)
        else:
            cx, cy = rng.uniform(-0.5, 0.5, size=2)
            a, b = rng.uniform(0.06, 0.35, size=2)
            value = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.35)
        theta = rng.uniform(0.0, math.pi)
        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    np.clip(img, 0.0, 1.0, out=img)
    return Tensor(img.astype(np.float32).reshape(1, 1, n, n))


def sample_patch(slice_: Tensor, patch: int, seed: int) -> Tensor:
    """Uniform random ``patch x patch`` crop of an NCHW slice."""
    h, w = slice_.shape[-2:]
    if patch < 1 or patch > h or patch > w:
        raise ContractViolation(f"patch {patch} does not fit slice of extent {h}x{w}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    return Tensor(slice_.data[..., top : top + patch, left : left + patch].copy())


# -- manifests ---------------------------------------------------------------------------
MANIFEST_HEADER = "# dnl-manifest v1"
ROLES = ("clean", "noisy")


@dataclass(frozen=True)
class ManifestEntry:
    role: str
    path: Path
    noise: NoiseModel | None = None


@dataclass
class DatasetManifest:
    """Lists the clean (F) and noisy (Q) images of one split.

    In a paired manifest the k-th clean entry matches the k-th noisy entry.
    Unpaired manifests refuse to hand out pairs.
    """

    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    unpaired: bool = True

    def clean_paths(self) -> list[Path]:
        return [e.path for e in self.entries if e.role == "clean"]

    def noisy_paths(self) -> list[Path]:
        return [e.path for e in self.entries if e.role == "noisy"]

    def noise_model(self) -> NoiseModel | None:
        models = {e.noise for e in self.entries if e.role == "noisy"}
        if len(models) > 1:
            raise ContractViolation(f"manifest mixes noise models: {sorted(m.descriptor() for m in models)}")
        return next(iter(models), None)

    def pairs(self) -> Iterator[tuple[Path, Path]]:
        if self.unpaired:
            raise PairingAccessError("this manifest is unpaired; (clean, noisy) pairings are not accessible")
        clean, noisy = self.clean_paths(), self.noisy_paths()
        if len(clean) != len(noisy):
            raise ContractViolation(f"paired manifest has {len(clean)} clean vs {len(noisy)} noisy entries")
        return iter(list(zip(clean, noisy)))


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = [MANIFEST_HEADER, f"# split={manifest.split}", f"# unpaired={'true' if manifest.unpaired else 'false'}"]
    for e in manifest.entries:
        p = Path(e.path).resolve()
        rel = p.relative_to(base) if p.is_relative_to(base) else p
        desc = e.noise.descriptor() if e.noise is not None else "none"
        lines.append(f"{e.role}\t{rel.as_posix()}\t{desc}")
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest.  All problems are reported together."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}", path)
    base = path.parent
    manifest = DatasetManifest(entries=[])
    problems: list[str] = []
    missing: list[Path] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line.lstrip("#").strip().partition("=")
            if sep and key.strip() == "split":
                manifest.split = value.strip()
            elif sep and key.strip() == "unpaired":
                manifest.unpaired = value.strip().lower() in ("1", "true", "yes")
            continue
        fields = raw.split("\t")
        if len(fields) != 3:
            problems.append(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
            continue
        role, rel, desc = (f.strip() for f in fields)
        if role not in ROLES:
            problems.append(f"line {lineno}: unknown role {role!r}")
            continue
        noise = None
        if desc != "none":
            try:
                noise = parse_noise(desc)
            except ContractViolation as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
        p = Path(rel)
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            missing.append(p)
        manifest.entries.append(ManifestEntry(role, p, noise))
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems), path)
    if missing:
        raise MissingFileError(f"{path}: missing file(s): " + ", ".join(str(m) for m in missing), missing[0])
    return manifest


def load_domain(paths) -> np.ndarray:
    """Stack RTF1 slices into an (N, 1, H, W) float32 array."""
    arrays = []
    for p in paths:
        a = load_slice(p)
        arrays.append(a.reshape((1,) * (4 - a.ndim) + a.shape) if a.ndim < 4 else a)
    if not arrays:
        raise ContractViolation("no images to load")
    return np.concatenate(arrays, axis=0)


# -- corpus synthesis ----------------------------------------------------------------------
@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 64
    n_test: int = 16
    size: int = 64
    n_ellipses: int = 8
    noise: NoiseModel = field(default_factory=lambda: Gaussian(0.0025))
    seed: int = 0


def corpus_phantom(spec: CorpusSpec, index: int) -> Tensor:
    return synth_phantom(PhantomSpec(spec.size, spec.n_ellipses, derive_seed(spec.seed, "phantom", index)))


def write_corpus(spec: CorpusSpec, out_dir) -> tuple[Path, Path]:
    """Write phantoms and manifests; return (train_manifest, test_manifest).

    Train is unpaired: the clean domain uses phantoms ``0..n_train-1`` and the
    noisy domain a disjoint set ``n_train..2*n_train-1``.  Test is paired.
    """
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    train, test = DatasetManifest(split="train", unpaired=True), DatasetManifest(split="test", unpaired=False)

    def emit(index: int, role: str) -> ManifestEntry:
        clean = corpus_phantom(spec, index)
        if role == "clean":
            p = out / "clean" / f"{index:05d}.rtf"
            save_slice(p, clean.data)
            return ManifestEntry("clean", p, None)
        noisy = inject_noise(clean, spec.noise, derive_seed(spec.seed, "noise", index))
        p = out / "noisy" / f"{index:05d}.rtf"
        save_slice(p, noisy.data)
        return ManifestEntry("noisy", p, spec.noise)

    for i in range(spec.n_train):
        train.entries.append(emit(i, "clean"))
    for i in range(spec.n_train, 2 * spec.n_train):
        train.entries.append(emit(i, "noisy"))
    for i in range(2 * spec.n_train, 2 * spec.n_train + spec.n_test):
        test.entries.append(emit(i, "clean"))
        test.entries.append(emit(i, "noisy"))
    save_manifest(train, out / "train.manifest")
    save_manifest(test, out / "test.manifest")
    return out / "train.manifest", out / "test.manifest"


def calibrate_gaussian(spec: CorpusSpec, target_psnr: float, n_probe: int = 16, tol: float = 0.05) -> Gaussian:
    """Bisect sigma2 (in log space) until the mean noisy PSNR of ``n_probe``
    corpus phantoms is within ``tol`` dB of ``target_psnr``."""
    from .metrics import psnr

    cleans = [corpus_phantom(spec, i) for i in range(n_probe)]

    def mean_psnr(log_s2: float) -> float:
        model = Gaussian(10.0**log_s2)
        vals = [
            psnr(c, inject_noise(c, model, derive_seed(spec.seed, "noise", i)), 1.0) for i, c in enumerate(cleans)
        ]
        return float(np.mean(vals))

    lo, hi = -8.0, 0.0  # log10 sigma2; PSNR falls as sigma2 grows
    mid = 0.5 * (lo + hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        got = mean_psnr(mid)
        if abs(got - target_psnr) <= tol:
            break
        if got > target_psnr:
            lo = mid
        else:
            hi = mid
    model = Gaussian(float(10.0**mid))
    log.info("calibrated %s for target %.2f dB", model.descriptor(), target_psnr)
    return model
