"""Command-line pipeline: extract, analyze, fit, score, gradcheck,
train, report.

Every command writes a run manifest (inputs with content hashes, flags,
tool version; no timestamps) before any other artifact, so identical
invocations produce byte-identical output trees. Exit codes: 0 success,
2 input/format/config, 3 empty result, 4 size constraint, 5 invariant
violation or divergence.

The FILTERPRIOR_OUT environment variable supplies a default output root
for commands invoked without --out.
"""

from __future__ import annotations

import argparse
import csv
import fnmatch
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EmptyResultError, InvariantViolation, ToolkitError
from .gmm import (
    EmConfig,
    GaussianMixture,
    em_fit_trace,
    grad_approx,
    grad_exact,
    nll,
    nll_total,
    responsibilities,
    sample_mixture,
)
from .nn import (
    SynthSpec,
    TrainConfig,
    build_network,
    load_cifar10,
    reference_layers,
    synth_dataset,
    train,
)
from .plots import save_cluster_means, save_gap_curves, save_histogram, save_loss_curves
from .regularizer import RegConfig
from .stats import assign, cluster_moments, kmeans_fit, render_report
from .tensorio import (
    TensorArchive,
    extract_filters,
    fmt_real,
    iter_kernel_slices,
    read_fbank,
    read_tarc,
    write_fbank,
)

OUT_ENV = "FILTERPRIOR_OUT"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    return value


def write_manifest(path, command: str, inputs, out, params: dict) -> Path:
    """Record what ran: inputs are hashed, flags recorded, no timestamps."""
    manifest = {
        "command": command,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "out": str(out),
        "params": _jsonable(params),
        "version": __version__,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _resolve_out(given, command: str, default_name: str | None = None):
    """--out if present, else a subdirectory of the FILTERPRIOR_OUT root."""
    if given is not None:
        return Path(given)
    root = os.environ.get(OUT_ENV)
    if root is None:
        raise ConfigError(f"--out is required (or set {OUT_ENV})")
    base = Path(root) / command
    return base / default_name if default_name else base


# ---------------------------------------------------------------------------
# extract

def _filter_entries(entries, include, exclude):
    kept = []
    for e in entries:
        if include and not any(fnmatch.fnmatchcase(e.name, g) for g in include):
            continue
        if exclude and any(fnmatch.fnmatchcase(e.name, g) for g in exclude):
            continue
        kept.append(e)
    return kept


def cmd_extract(args) -> int:
    out = _resolve_out(args.out, "extract", "bank.fbank")
    write_manifest(
        Path(str(out) + ".manifest.json"), "extract", args.tarc, out,
        {"include": args.include, "exclude": args.exclude, "tarc": [str(p) for p in args.tarc]},
    )
    entries = []
    for path in args.tarc:
        entries.extend(read_tarc(path).entries)
    entries = _filter_entries(entries, args.include, args.exclude)
    archive = TensorArchive(entries)
    bank = extract_filters(archive)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_fbank(bank, out)
    for e in entries:
        count = sum(1 for _ in iter_kernel_slices(e.data))
        if count:
            print(f"{e.name}: {count} filters")
    print(f"extracted {bank.n} filters -> {out}")
    return 0


# ---------------------------------------------------------------------------
# analyze

def cmd_analyze(args) -> int:
    out = _resolve_out(args.out, "analyze")
    write_manifest(out / "manifest.json", "analyze", [args.bank], out,
                   {"bank": str(args.bank), "k": args.k, "seed": args.seed})
    bank = read_fbank(args.bank)
    model = kmeans_fit(bank, args.k, args.seed)
    report = cluster_moments(bank, assign(model, bank), k=args.k)
    written = render_report(report, out)
    written.append(save_cluster_means(report.means, out / "cluster_means.png"))
    written.append(save_histogram(report.histogram, out / "histogram.png"))
    print(f"clustered {bank.n} filters into k={args.k} (distortion {model.distortion:.6g})")
    print("histogram:", ",".join(str(int(c)) for c in report.histogram))
    print(f"wrote {len(written)} artifacts -> {out}")
    return 0


# ---------------------------------------------------------------------------
# fit

def cmd_fit(args) -> int:
    out = _resolve_out(args.out, "fit", "model.gmm")
    write_manifest(
        Path(str(out) + ".manifest.json"), "fit", [args.bank], out,
        {"bank": str(args.bank), "k": args.k, "seed": args.seed,
         "max_iters": args.max_iters, "tol": args.tol},
    )
    bank = read_fbank(args.bank)
    cfg = EmConfig(k=args.k, max_iters=args.max_iters, rel_tol=args.tol, seed=args.seed)
    model, trace = em_fit_trace(bank, cfg)
    for step in trace:
        note = f"  reseeded {list(step.reseeded)}" if step.reseeded else ""
        print(f"iter {step.index:3d}  ll {step.log_likelihood:.6f}{note}")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    print(f"fitted K={args.k} mixture on {bank.n} filters -> {out}")
    return 0


# ---------------------------------------------------------------------------
# score / gradcheck

def cmd_score(args) -> int:
    bank = read_fbank(args.bank)
    model = GaussianMixture.load(args.model)
    if bank.n == 0:
        raise EmptyResultError("bank has no filters to score")
    total = nll_total(bank, model)
    mean = total / bank.n
    if args.out is not None:
        out = Path(args.out)
        write_manifest(out / "manifest.json", "score", [args.bank, args.model], out,
                       {"bank": str(args.bank), "model": str(args.model)})
        (out / "score.csv").write_text(
            "n,total_nll,mean_nll\n"
            f"{bank.n},{fmt_real(total)},{fmt_real(mean)}\n")
    print(f"n {bank.n}  total_nll {total:.6f}  mean_nll {mean:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    model = GaussianMixture.load(args.model)
    if args.out is not None:
        out = Path(args.out)
        write_manifest(out / "manifest.json", "gradcheck", [args.model], out,
                       {"model": str(args.model), "probes": args.probes, "seed": args.seed})
    rng = np.random.default_rng(args.seed)
    h = 1e-5
    worst_fd = (0.0, None)
    worst_dom = (0.0, None)
    dominated = 0
    for i in range(args.probes):
        if i % 2 == 0:
            w = sample_mixture(model, 1, rng)[0]
        else:
            w = rng.standard_normal(model.dim) * 2.0
        g = grad_exact(w, model)
        fd = np.empty_like(w)
        for j in range(w.shape[0]):
            wp, wm = w.copy(), w.copy()
            wp[j] += h
            wm[j] -= h
            fd[j] = (nll(wp, model) - nll(wm, model)) / (2 * h)
        rel = float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)))
        if rel > worst_fd[0]:
            worst_fd = (rel, w.copy())
        if responsibilities(w, model).max() > 1 - 1e-12:
            dominated += 1
            diff = float(np.max(np.abs(grad_approx(w, model) - g)))
            if diff > worst_dom[0]:
                worst_dom = (diff, w.copy())
    print(f"exact-vs-fd worst relative error: {worst_fd[0]:.3e} (limit 1e-6)")
    print(f"dominated probes: {dominated}/{args.probes}; "
          f"approx-vs-exact worst abs error: {worst_dom[0]:.3e} (limit 1e-9)")
    if worst_fd[0] > 1e-6:
        raise InvariantViolation(
            f"exact gradient mismatch {worst_fd[0]:.3e} at probe {worst_fd[1]}")
    if worst_dom[0] > 1e-9:
        raise InvariantViolation(
            f"approximate gradient mismatch {worst_dom[0]:.3e} at probe {worst_dom[1]}")
    print("gradcheck: pass")
    return 0


# ---------------------------------------------------------------------------
# train

TRAIN_KEYS = ("learning_rate", "batch_size", "iterations", "seed", "lambda",
              "alpha", "gradient_mode", "scope", "snapshot_iters")


def _load_train_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    missing = [k for k in TRAIN_KEYS if k not in raw]
    if missing:
        raise ConfigError("config missing keys: " + ", ".join(missing))
    return raw


def _dataset_from_config(data: dict):
    kind = data.get("kind", "synth")
    if kind == "synth":
        spec = SynthSpec(
            classes=data.get("classes", 10),
            per_class=data.get("per_class", 100),
            channels=data.get("channels", 3),
            size=data.get("size", 32),
            noise=data.get("noise", 0.12),
            jitter=data.get("jitter", 0.0),
        )
        test_spec = SynthSpec(spec.classes, data.get("test_per_class", spec.per_class // 5 or 1),
                              spec.channels, spec.size, spec.noise, spec.jitter)
        tr = synth_dataset(spec, data.get("train_seed", 1000), "train")
        te = synth_dataset(test_spec, data.get("test_seed", 2000), "test")
        return tr, te
    if kind == "cifar10":
        tr = load_cifar10(data["dir"], "train", data.get("train_limit"))
        te = load_cifar10(data["dir"], "test", data.get("test_limit"))
        return tr, te
    raise ConfigError(f"unknown data kind {kind!r}")


def cmd_train(args) -> int:
    raw = _load_train_config(args.config)
    out = _resolve_out(args.out if args.out is not None else raw.get("out"), "train")
    scope = raw["scope"]
    if isinstance(scope, str):
        scope = [scope]
    reg = RegConfig(lam=float(raw["lambda"]), alpha=float(raw["alpha"]),
                    gradient_mode=raw["gradient_mode"], scope=scope)
    cfg = TrainConfig(
        learning_rate=float(raw["learning_rate"]),
        batch_size=int(raw["batch_size"]),
        iterations=int(raw["iterations"]),
        seed=int(raw["seed"]),
        reg=reg,
        eval_every=int(raw.get("eval_every", 500)),
        snapshot_iters=tuple(int(i) for i in raw["snapshot_iters"]),
    )
    model = None
    inputs = [args.config]
    if reg.lam != 0.0:
        if "model" not in raw:
            raise ConfigError("lambda > 0 requires a 'model' path in the config")
        model = GaussianMixture.load(raw["model"])
        inputs.append(raw["model"])
    write_manifest(out / "manifest.json", "train", inputs, out, raw)

    tr, te = _dataset_from_config(raw.get("data", {}))
    arch = raw.get("arch", {})
    layers = reference_layers(
        in_shape=tuple(tr.images.shape[1:]),
        channels=tuple(arch.get("channels", (16, 32))),
        classes=int(arch.get("classes", int(tr.labels.max()) + 1)),
    )
    net = build_network(layers, int(raw.get("net_seed", raw["seed"])))
    result = train(net, tr, te, cfg, model=model, out_dir=out)
    last = result.records[-1]
    print(f"trained {cfg.iterations} iterations; "
          f"final train {last.train_loss:.4f} test {last.test_loss:.4f} "
          f"acc {last.test_acc:.3f} gap {last.test_loss - last.train_loss:+.4f}")
    print(f"log and snapshots -> {out}")
    return 0


# ---------------------------------------------------------------------------
# report

def _read_log(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    its = [int(r["iteration"]) for r in rows]
    tr = [float(r["train_loss"]) for r in rows]
    te = [float(r["test_loss"]) for r in rows]
    acc = [float(r["test_acc"]) for r in rows]
    return its, tr, te, acc


def cmd_report(args) -> int:
    logs_root = Path(args.logs)
    log_files = sorted(logs_root.glob("*/log.csv"))
    if (logs_root / "log.csv").exists():
        log_files.insert(0, logs_root / "log.csv")
    if not log_files:
        raise EmptyResultError(f"no log.csv files under {logs_root}")
    out = _resolve_out(args.out, "report")
    write_manifest(out / "manifest.json", "report", log_files, out,
                   {"logs": str(args.logs)})

    gap_runs, loss_runs, table = {}, {}, []
    for path in log_files:
        name = path.parent.name
        its, tr, te, acc = _read_log(path)
        if not its:
            continue
        gaps = [b - a for a, b in zip(tr, te)]
        gap_runs[name] = (its, gaps)
        loss_runs[name] = (its, tr, te)
        lines = ["iteration,gap"]
        lines += [f"{i},{fmt_real(g)}" for i, g in zip(its, gaps)]
        (out / f"{name}_gap.csv").write_text("\n".join(lines) + "\n")
        table.append((name, its[-1], tr[-1], te[-1], gaps[-1], acc[-1]))
    if not table:
        raise EmptyResultError("all training logs were empty")

    lines = ["run,final_iteration,final_train_loss,final_test_loss,final_gap,final_test_acc"]
    for name, it, trl, tel, gap, a in sorted(table):
        lines.append(f"{name},{it},{fmt_real(trl)},{fmt_real(tel)},{fmt_real(gap)},{fmt_real(a)}")
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    save_gap_curves(gap_runs, out / "gap_curves.png")
    save_loss_curves(loss_runs, out / "loss_curves.png")
    for name, it, trl, tel, gap, a in sorted(table):
        print(f"{name}: iter {it}  train {trl:.4f}  test {tel:.4f}  "
              f"gap {gap:+.4f}  acc {a:.3f}")
    print(f"report -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="filterprior",
        description="Filter-statistics capture, mixture fitting, and "
                    "statistically regularized CNN training.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("extract", help="collect 3x3 filters from tensor archives")
    q.add_argument("--tarc", action="append", required=True, type=Path,
                   help="input archive (repeatable)")
    q.add_argument("--include", action="append", default=[], metavar="GLOB")
    q.add_argument("--exclude", action="append", default=[], metavar="GLOB")
    q.add_argument("--out", type=Path, default=None, help="output .fbank path")
    q.set_defaults(func=cmd_extract)

    q = sub.add_parser("analyze", help="cluster a filter bank and report moments")
    q.add_argument("--bank", required=True, type=Path)
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", type=Path, default=None)
    q.set_defaults(func=cmd_analyze)

    q = sub.add_parser("fit", help="fit a diagonal-covariance mixture by EM")
    q.add_argument("--bank", required=True, type=Path)
    q.add_argument("--k", type=int, default=64)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--max-iters", type=int, default=200)
    q.add_argument("--tol", type=float, default=1e-7)
    q.add_argument("--out", type=Path, default=None, help="output .gmm path")
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("score", help="total and mean penalty of a bank under a model")
    q.add_argument("--bank", required=True, type=Path)
    q.add_argument("--model", required=True, type=Path)
    q.add_argument("--out", type=Path, default=None)
    q.set_defaults(func=cmd_score)

    q = sub.add_parser("gradcheck", help="audit exact and approximate gradients")
    q.add_argument("--model", required=True, type=Path)
    q.add_argument("--probes", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", type=Path, default=None)
    q.set_defaults(func=cmd_gradcheck)

    q = sub.add_parser("train", help="train a CNN per a JSON run configuration")
    q.add_argument("--config", required=True, type=Path)
    q.add_argument("--out", type=Path, default=None)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("report", help="aggregate run logs into gap curves and tables")
    q.add_argument("--logs", required=True, type=Path)
    q.add_argument("--out", type=Path, default=None)
    q.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
