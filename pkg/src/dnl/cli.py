"""``dnl`` command-line entry point.

Exit codes: 0 success, 2 configuration/IO error, 3 numeric failure,
4 model/noise or method mismatch.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import configparser
import csv
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, load_config, parse_config_text
from .data import DatasetManifest, calibrate_gaussian, load_domain, load_manifest, parse_noise, write_corpus
from .errors import ContractViolation, DataError, ModelMismatchError, NumericError
from .inference import denoise_cyclegan, denoise_n2s
from .metrics import composite_score, finite_mean, psnr, ssim
from .nn import Variant
from .tensor import Tensor
from .train import CYCLEGAN_COMPONENTS, N2S_COMPONENTS, TrainConfig, load_state, train_cyclegan, train_n2s

log = logging.getLogger("dnl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4

ADVERSARIAL = ("adv_F", "adv_Q", "d_F", "d_Q")
CYCLE_IDENTITY = ("cyc_F", "cyc_Q", "idn_F", "idn_Q")


class UsageError(ContractViolation):
    pass


def _say(msg: str = "") -> None:
    print(msg, flush=True)


def _overrides(args) -> dict:
    o: dict[str, dict[str, str]] = {}
    if getattr(args, "method", None) in ("cyclegan", "n2s"):
        o.setdefault("model", {})["method"] = args.method
    return o


def _need_config(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    return load_config(args.config, _overrides(args))


# -- synth ---------------------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = _need_config(args)
    d = cfg["data"]
    noise = parse_noise(args.noise) if args.noise else d["noise"]
    seed = d["seed"] if args.seed is None else args.seed
    spec = replace(cfg.corpus_spec(noise), seed=seed)
    target = args.calibrate_psnr if args.calibrate_psnr is not None else d["calibrate_psnr"]
    if target is not None:
        noise = calibrate_gaussian(spec, target)
        spec = replace(spec, noise=noise)
        _say(f"calibrated noise {noise.descriptor()} for target input PSNR {target:.2f} dB")
    out = Path(args.out) if args.out else cfg.data_root
    train_m, test_m = write_corpus(spec, out)
    summary = {"n_train_per_domain": spec.n_train, "n_test": spec.n_test, "size": spec.size,
               "noise": noise.descriptor(), "seed": seed}
    if spec.n_test:
        test = load_manifest(test_m)
        pairs = list(test.pairs())
        C, Y = load_domain([c for c, _ in pairs]), load_domain([n for _, n in pairs])
        summary["input_psnr"] = finite_mean(psnr(C[i], Y[i]) for i in range(len(C)))
        summary["input_ssim"] = float(np.mean([ssim(C[i], Y[i]) for i in range(len(C))]))
    (out / "corpus.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _say(f"wrote {spec.n_train} clean + {spec.n_train} noisy training slices and {spec.n_test} test pairs to {out}")
    if "input_psnr" in summary:
        _say(f"test input: mean PSNR {summary['input_psnr']:.3f} dB, mean SSIM {summary['input_ssim']:.5f}")
    _say(f"manifests: {train_m} {test_m}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------------
def resolve_train_config(cfg: ExperimentConfig, manifest: DatasetManifest, noise_flag=None, seed=None) -> TrainConfig:
    if noise_flag:
        noise = parse_noise(noise_flag)
    elif cfg["train"]["noise"]:
        noise = parse_noise(cfg["train"]["noise"])
    else:
        noise = manifest.noise_model() or cfg["data"]["noise"]
    return cfg.train_config(noise, seed)


def run_dir_name(tc: TrainConfig, manifest_path: Path) -> str:
    return f"{tc.method}-{config_hash(tc, manifest_path.read_bytes())}-s{tc.seed}"


def run_training(tc: TrainConfig, manifest_path: Path, run_dir: Path, resume: bool = False, quiet: bool = False):
    manifest = load_manifest(manifest_path)
    ckpt = run_dir / "checkpoint.ckpt"
    resume_from = ckpt if resume and ckpt.is_file() else None
    run_dir.mkdir(parents=True, exist_ok=True)
    run_info = {"config": tc.to_dict(), "train_manifest": str(manifest_path.resolve())}
    (run_dir / "run.json").write_text(json.dumps(run_info, indent=2, sort_keys=True) + "\n")

    def progress(r):
        if not quiet:
            _say(f"epoch {r.epoch:4d}  lr {r.lr:.3g}  " + "  ".join(f"{k} {v:.5f}" for k, v in r.losses.items()))

    trainer = train_cyclegan if tc.method == "cyclegan" else train_n2s
    return trainer(tc, manifest, out_dir=run_dir, resume=resume_from, progress=progress)


def cmd_train(args) -> int:
    cfg = _need_config(args)
    manifest_path = Path(args.manifest) if args.manifest else cfg.train_manifest()
    manifest = load_manifest(manifest_path)
    tc = resolve_train_config(cfg, manifest, args.noise, args.seed)
    runs = Path(args.out) if args.out else cfg.path(cfg["train"]["runs"])
    run_dir = runs / run_dir_name(tc, manifest_path)
    if (run_dir / "checkpoint.ckpt").exists() and not args.resume:
        if not args.force:
            raise UsageError(f"run directory {run_dir} already holds a checkpoint; pass --resume or --force")
        shutil.rmtree(run_dir)
    _say(f"run directory: {run_dir}")
    run_training(tc, manifest_path, run_dir, resume=args.resume)
    _say(str(run_dir))
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------------
@dataclass
class EvalResult:
    rows: list[dict]
    aggregate: dict


def _denoiser(method: str, ckpt, noise_flag):
    if method == "identity":
        return (lambda y: y), None
    if ckpt is None:
        raise UsageError(f"--method {method} needs --checkpoint or --run")
    state, tc = load_state(ckpt)
    if method != tc.method:
        raise ModelMismatchError(f"--method {method} but checkpoint {ckpt} holds a {tc.method} model")
    if tc.method == "cyclegan":
        if noise_flag:
            log.warning("--noise is ignored for CycleGAN evaluation")
        g, gcfg = state.nets["g_q2f"], tc.generator_config()
        return (lambda y: denoise_cyclegan(g, gcfg, y)), tc
    model = tc.noise
    if noise_flag:
        flagged = parse_noise(noise_flag)
        if flagged != model:
            raise ModelMismatchError(
                f"--noise {flagged.descriptor()} does not match the model's training noise {model.descriptor()}"
            )
    params, gcfg = state.params, tc.generator_config()
    return (lambda y: denoise_n2s(params, gcfg, y, model)), tc


def evaluate(method: str, manifest_path: Path, ckpt=None, noise_flag=None, data_range: float = 1.0) -> EvalResult:
    manifest = load_manifest(manifest_path)
    pairs = list(manifest.pairs())
    if not pairs:
        raise ContractViolation(f"no (clean, noisy) pairs in {manifest_path}")
    denoise, tc = _denoiser(method, ckpt, noise_flag)
    if tc is not None and tc.method == "n2s":
        actual = manifest.noise_model()
        if actual is not None and type(actual) is not type(tc.noise):
            log.warning("evaluation data carries %s noise but the model assumes %s",
                        actual.descriptor(), tc.noise.descriptor())
    rows = []
    for clean_p, noisy_p in pairs:
        c, y = load_domain([clean_p]), load_domain([noisy_p])
        d = np.asarray(denoise(Tensor(y)).data)
        row = {
            "image_id": noisy_p.stem,
            "psnr_noisy": psnr(c, y, data_range), "ssim_noisy": ssim(c, y, data_range),
            "psnr_denoised": psnr(c, d, data_range), "ssim_denoised": ssim(c, d, data_range),
        }
        row["est_score"] = composite_score(row["psnr_denoised"], row["ssim_denoised"])
        rows.append(row)
    in_p = finite_mean(r["psnr_noisy"] for r in rows)
    in_s = float(np.mean([r["ssim_noisy"] for r in rows]))
    out_p = finite_mean(r["psnr_denoised"] for r in rows)
    out_s = float(np.mean([r["ssim_denoised"] for r in rows]))
    aggregate = {
        "method": method,
        "n_images": len(rows),
        "INPUT": {"avg_noisy_psnr_db": in_p, "avg_noisy_ssim": in_s},
        "RESULT": {
            "avg_psnr_db": out_p,
            "avg_ssim": out_s,
            "delta_psnr_db": out_p - in_p,
            "delta_ssim": out_s - in_s,
            "delta_ssim_pct": 100.0 * (out_s - in_s) / in_s if in_s else math.nan,
            "est_score": composite_score(out_p, out_s),
        },
    }
    return EvalResult(rows, aggregate)


EVAL_COLUMNS = ("image_id", "psnr_noisy", "ssim_noisy", "psnr_denoised", "ssim_denoised", "est_score")


def write_eval(result: EvalResult, out_dir: Path, stem: str = "eval") -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in result.rows:
            w.writerow([r["image_id"]] + [repr(float(r[k])) for k in EVAL_COLUMNS[1:]])
    json_path.write_text(json.dumps(result.aggregate, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def format_aggregate(agg: dict) -> str:
    i, r = agg["INPUT"], agg["RESULT"]
    return "\n".join([
        f"INPUT   avg. noisy PSNR {i['avg_noisy_psnr_db']:.5f} dB   avg. noisy SSIM {i['avg_noisy_ssim']:.5f}",
        f"RESULT  avg. PSNR {r['avg_psnr_db']:.5f} dB ({r['delta_psnr_db']:+.3f} dB)   "
        f"avg. SSIM {r['avg_ssim']:.5f} ({r['delta_ssim_pct']:+.2f} %)   est. Score {r['est_score']:.5f}",
    ])


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    ckpt = Path(args.checkpoint) if args.checkpoint else (Path(args.run) / "checkpoint.ckpt" if args.run else None)
    if args.manifest:
        manifest = Path(args.manifest)
    elif cfg is not None:
        manifest = cfg.eval_manifest()
    elif ckpt is not None and (ckpt.parent / "run.json").is_file():
        info = json.loads((ckpt.parent / "run.json").read_text())
        manifest = Path(info["train_manifest"]).parent / "test.manifest"
    else:
        raise UsageError("eval needs --manifest, --config, or a run directory with run.json")
    method = args.method
    if method is None:
        if ckpt is None:
            raise UsageError("eval needs --method identity or a checkpoint")
        method = load_state(ckpt)[1].method
    data_range = cfg["eval"]["data_range"] if cfg is not None else 1.0
    result = evaluate(method, manifest, ckpt, args.noise, data_range)
    out = Path(args.out) if args.out else (ckpt.parent if ckpt is not None else Path("."))
    csv_path, json_path = write_eval(result, out, f"eval_{method}")
    _say(format_aggregate(result.aggregate))
    _say(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


# -- sweep -----------------------------------------------------------------------------------
SWEEP_KEYS = {"architecture": "variant", "lambda_cycle": "lambda_cycle", "lambda_iden": "lambda_iden",
              "ngf": "ngf", "ndf": "ndf"}
SWEEP_COLUMNS = ("#", "name", "architecture", "lambda_cycle", "lambda_iden", "ngf", "ndf",
                 "psnr", "ssim", "est_score", "status", "best")


@dataclass(frozen=True)
class SweepRow:
    name: str
    architecture: str
    lambda_cycle: float
    lambda_iden: float
    ngf: int
    ndf: int


def load_sweep(path) -> tuple[Path, list[SweepRow]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"sweep spec not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(path.read_text())
    except configparser.Error as exc:  # duplicate row names land here
        raise ContractViolation(f"sweep spec error: {exc}") from None
    if "sweep" not in cp or "base_config" not in cp["sweep"]:
        raise ContractViolation("sweep spec needs a [sweep] section with base_config")
    extra = set(cp["sweep"]) - {"base_config"}
    if extra:
        raise ContractViolation(f"unknown [sweep] keys: {sorted(extra)}")
    base = Path(cp["sweep"]["base_config"])
    base = base if base.is_absolute() else path.parent / base
    rows, problems = [], []
    for name in cp.sections():
        if name == "sweep":
            continue
        kv = dict(cp[name])
        unknown = set(kv) - set(SWEEP_KEYS)
        missing = set(SWEEP_KEYS) - set(kv)
        if unknown or missing:
            problems.append(f"[{name}] unknown {sorted(unknown)} missing {sorted(missing)}")
            continue
        try:
            rows.append(SweepRow(name, Variant.parse(kv["architecture"]).value, float(kv["lambda_cycle"]),
                                 float(kv["lambda_iden"]), int(kv["ngf"]), int(kv["ndf"])))
        except (ValueError, ContractViolation) as exc:
            problems.append(f"[{name}] {exc}")
    if problems:
        raise ContractViolation("invalid sweep spec: " + "; ".join(problems))
    if not rows:
        raise ContractViolation("sweep spec lists no configurations")
    return base, rows


def table_from_pairs(pairs) -> list[dict]:
    """Rows with est. Score recomputed from each (PSNR, SSIM) pair, best flagged."""
    rows = [{"psnr": float(p), "ssim": float(s), "est_score": composite_score(p, s), "status": "OK"}
            for p, s in pairs]
    flag_best(rows)
    return rows


def flag_best(rows: list[dict]) -> int | None:
    """Mark the row with the highest est. Score (ties: SSIM, then PSNR)."""
    ok = [i for i, r in enumerate(rows) if r["status"] == "OK"]
    for r in rows:
        r["best"] = False
    if not ok:
        return None
    best = max(ok, key=lambda i: (rows[i]["est_score"], rows[i]["ssim"], rows[i]["psnr"], -i))
    rows[best]["best"] = True
    return best


def _sweep_one(base_text: str, base_dir: str, row: SweepRow, out_dir: str, seed) -> dict:
    overrides = {
        "model": {"method": "cyclegan", "variant": row.architecture, "ngf": str(row.ngf), "ndf": str(row.ndf)},
        "train": {"lambda_cycle": repr(row.lambda_cycle), "lambda_iden": repr(row.lambda_iden)},
    }
    result = {"name": row.name, "psnr": math.nan, "ssim": math.nan, "est_score": math.nan}
    try:
        cfg = parse_config_text(base_text, base_dir, overrides)
        manifest_path = cfg.train_manifest()
        tc = resolve_train_config(cfg, load_manifest(manifest_path), seed=seed)
        run_dir = Path(out_dir) / "runs" / row.name
        if run_dir.exists():
            shutil.rmtree(run_dir)
        run_training(tc, manifest_path, run_dir, quiet=True)
        ev = evaluate("cyclegan", cfg.eval_manifest(), run_dir / "checkpoint.ckpt",
                      data_range=cfg["eval"]["data_range"])
        write_eval(ev, run_dir, "eval_cyclegan")
        r = ev.aggregate["RESULT"]
        result.update(psnr=r["avg_psnr_db"], ssim=r["avg_ssim"], est_score=r["est_score"], status="OK")
    except Exception as exc:  # a failed row must not stop the sweep
        result.update(status="FAILED", error=f"{type(exc).__name__}: {exc}")
    return result


def _fmt(v, spec):
    return "-" if isinstance(v, float) and math.isnan(v) else format(v, spec)


def format_sweep(rows: list[SweepRow], results: list[dict]) -> str:
    head = f"{'#':>2}  {'name':<14} {'architecture':<15} {'l_cyc':>6} {'l_idn':>6} {'ngf':>4} {'ndf':>4} " \
           f"{'PSNR':>8} {'SSIM':>7} {'est.Score':>9}"
    lines = [head, "-" * len(head)]
    for i, (row, res) in enumerate(zip(rows, results), start=1):
        mark = "  <- best" if res.get("best") else ("  FAILED" if res["status"] != "OK" else "")
        lines.append(
            f"{i:>2}  {row.name:<14} {row.architecture:<15} {row.lambda_cycle:>6g} {row.lambda_iden:>6g} "
            f"{row.ngf:>4} {row.ndf:>4} {_fmt(res['psnr'], '8.3f')} {_fmt(res['ssim'], '7.3f')} "
            f"{_fmt(res['est_score'], '9.3f')}{mark}"
        )
    lines.append("est. Score = PSNR/40 + SSIM on the held-out split")
    return "\n".join(lines) + "\n"


def run_sweep(spec_path, out_dir: Path, seed=None, workers: int = 1) -> list[dict]:
    base, rows = load_sweep(spec_path)
    if not base.is_file():
        raise FileNotFoundError(f"base config not found: {base}")
    base_text = base.read_text()
    parse_config_text(base_text, str(base.parent))  # validate once up front
    out_dir.mkdir(parents=True, exist_ok=True)
    args = [(base_text, str(base.parent), r, str(out_dir), seed) for r in rows]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, *zip(*args)))
    else:
        results = []
        for a in args:
            _say(f"sweep: running {a[2].name}")
            results.append(_sweep_one(*a))
    flag_best(results)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for i, (row, res) in enumerate(zip(rows, results), start=1):
            w.writerow([i, row.name, row.architecture, repr(row.lambda_cycle), repr(row.lambda_iden), row.ngf,
                        row.ndf, repr(res["psnr"]), repr(res["ssim"]), repr(res["est_score"]), res["status"],
                        "yes" if res["best"] else ""])
    (out_dir / "sweep.txt").write_text(format_sweep(rows, results))
    return results


def cmd_sweep(args) -> int:
    if not args.config:
        raise UsageError("sweep needs --config <sweep spec>")
    if args.out:
        out = Path(args.out)
    else:
        base = load_config(load_sweep(args.config)[0])
        out = base.path(base["train"]["runs"]) / f"sweep-{Path(args.config).stem}"
    results = run_sweep(args.config, out, args.seed, args.parallel)
    for r in results:
        if r["status"] != "OK":
            _say(f"sweep row {r['name']} FAILED: {r.get('error')}")
    _say((out / "sweep.txt").read_text().rstrip())
    return EXIT_OK


# -- export-curves -----------------------------------------------------------------------------
def export_curves(run_dir: Path, out_dir: Path) -> list[Path]:
    src = run_dir / "losses.csv"
    if not src.is_file():
        raise FileNotFoundError(f"no loss log in {run_dir} (expected losses.csv)")
    with open(src, newline="") as fh:
        records = list(csv.DictReader(fh))
    header = set(records[0]) if records else set()
    if set(CYCLEGAN_COMPONENTS) <= header:
        panels = {"curves_adversarial.csv": ADVERSARIAL, "curves_cycle_identity.csv": CYCLE_IDENTITY}
    elif set(N2S_COMPONENTS) <= header:
        panels = {"curves_n2s.csv": N2S_COMPONENTS}
    else:
        raise ContractViolation(f"{src} has neither CycleGAN nor N2S loss columns")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, cols in panels.items():
        with open(out_dir / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", *cols])
            for rec in records:
                w.writerow([rec["epoch"], *(rec[c] for c in cols)])
        written.append(out_dir / name)
    return written


def cmd_export_curves(args) -> int:
    run = args.run or args.out
    if not run:
        raise UsageError("export-curves needs --run <run dir>")
    out = Path(args.out) if args.out else Path(run)
    for p in export_curves(Path(run), out):
        _say(f"wrote {p}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnl", description="Pair-free CT denoising laboratory (CycleGAN and Noise2Score)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (.ini); a sweep spec for `sweep`")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--method", choices=["cyclegan", "n2s"], help="training method override")
        sp.add_argument("--noise", help="noise descriptor, e.g. gaussian:0.0025, poisson:0.01, gamma:50")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("synth", help="write a synthetic phantom corpus and manifests"))
    s.add_argument("--calibrate-psnr", type=float, help="tune gaussian sigma2 to this mean input PSNR (dB)")

    t = common(sub.add_parser("train", help="train a CycleGAN or Noise2Score model"))
    t.add_argument("--manifest", help="training manifest (default from config)")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    t.add_argument("--force", action="store_true", help="discard an existing run directory")

    e = sub.add_parser("eval", help="denoise a paired split and report PSNR/SSIM")
    e.add_argument("--config")
    e.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    e.add_argument("--out")
    e.add_argument("--method", choices=["cyclegan", "n2s", "identity"])
    e.add_argument("--noise", help="noise model to assume (must match a N2S model's training noise)")
    e.add_argument("--checkpoint")
    e.add_argument("--run", help="run directory (uses its checkpoint.ckpt)")
    e.add_argument("--manifest", help="paired evaluation manifest")
    e.add_argument("-v", "--verbose", action="store_true")

    w = common(sub.add_parser("sweep", help="train and score a list of CycleGAN configurations"))
    w.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes (output is identical)")

    x = common(sub.add_parser("export-curves", help="split a run's loss log into per-panel CSVs"))
    x.add_argument("--run", help="run directory")
    return p


def _apply_thread_cap():
    raw = os.environ.get("DNL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"DNL_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "export-curves": cmd_export_curves}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limiter = _apply_thread_cap()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ModelMismatchError as exc:
        print(f"dnl: mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericError as exc:
        print(f"dnl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractViolation, DataError, OSError) as exc:
        print(f"dnl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
