"""Command-line driver: train, eval, sweep, scale and gen-data.

Every run writes its metrics as CSV next to a JSON manifest with the
resolved options, so ``--config run.json`` re-executes it.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, gen_rectangles, load_idx_dir, load_mnist, save_idx_dir
from .lsh_index import DEFAULT_K, DEFAULT_L, DEFAULT_PROBES
from .network import Network, StructureError
from .samplers import AD, LSH, SAMPLERS, STD, SamplerConfig
from .trainer import (CSV_FIELDS, ConfigError, DivergenceError, TrainConfig, evaluate,
                      train_async, worker_ladder, write_manifest)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DATA = 0, 2, 3, 4
SWEEP_LEVELS = (0.05, 0.10, 0.25, 0.5, 0.75, 0.9)
AD_MIN_LEVEL = 0.25
MNIST_ENV = "HASHPROP_MNIST_DIR"


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def parse_layers(text: str) -> list[int]:
    """``2x256`` or ``256,128``."""
    text = text.strip().lower()
    try:
        if "x" in text:
            count, width = text.split("x")
            sizes = [int(width)] * int(count)
        else:
            sizes = [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer spec {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError(f"bad layer spec {text!r}")
    return sizes


def parse_levels(text: str) -> list[float]:
    try:
        levels = [float(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None
    if not levels or not all(0.0 < v <= 1.0 for v in levels):
        raise argparse.ArgumentTypeError("levels must lie in (0, 1]")
    return levels


def _common(p: argparse.ArgumentParser, training: bool = True):
    g = p.add_argument_group("data")
    g.add_argument("--dataset", choices=("rectangles", "mnist", "idx"), default="rectangles")
    g.add_argument("--data-dir", default=None,
                   help=f"IDX directory for mnist/idx (mnist also reads ${MNIST_ENV})")
    g.add_argument("--train-size", type=int, default=10000, help="rectangles only")
    g.add_argument("--test-size", type=int, default=2000, help="rectangles only")
    g.add_argument("--data-seed", type=int, default=0, help="rectangles only")

    g = p.add_argument_group("sampler")
    g.add_argument("--sampler", choices=SAMPLERS, default=STD)
    g.add_argument("--keep-prob", type=float, default=0.5)
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=0.0)
    g.add_argument("--k-frac", type=float, default=0.05)
    g.add_argument("--lsh-k", type=int, default=DEFAULT_K)
    g.add_argument("--lsh-l", type=int, default=DEFAULT_L)
    g.add_argument("--probes", type=int, default=DEFAULT_PROBES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None,
                   help="key=value file or a run manifest; explicit flags win")
    if not training:
        return
    g = p.add_argument_group("training")
    g.add_argument("--layers", type=parse_layers, default=[256, 256])
    g.add_argument("--epochs", type=int, default=5)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--oversubscribe", action="store_true",
                   help="allow more workers than cores")
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--optimizer", choices=("sgd", "momentum", "adagrad", "combined"),
                   default="adagrad")
    g.add_argument("--lr", type=float, default=1e-2)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--rehash-every", type=int, default=1)
    g.add_argument("--eval-mode", choices=("auto", "dense", "sparse", "wta", "ad"),
                   default="auto")
    g.add_argument("--out", default="runs/latest", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hashprop",
                                     description="Sparse hashing-based neural network training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("dense", "sparse", "wta", "ad"), default="dense")
    p.add_argument("--json", action="store_true", help="print a JSON record")

    p = sub.add_parser("sweep", help="sampler x active-fraction grid")
    _common(p)
    p.add_argument("--levels", type=parse_levels, default=list(SWEEP_LEVELS))
    p.add_argument("--samplers", default=",".join(SAMPLERS),
                   help="comma-separated subset of " + ",".join(SAMPLERS))

    p = sub.add_parser("scale", help="throughput and convergence over a worker ladder")
    _common(p)
    p.add_argument("--max-workers", type=int, default=None,
                   help="top of the ladder (default: core count)")

    p = sub.add_parser("gen-data", help="write a synthetic dataset as IDX files")
    p.add_argument("--kind", choices=("rectangles",), default="rectangles")
    p.add_argument("--train-size", type=int, default=10000)
    p.add_argument("--test-size", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    return parser


def _read_config(path) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict):
        return dict(doc.get("options", doc))
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in _read_config(args.config).items():
            dest = key.replace("-", "_")
            if dest in ("command", "config"):
                continue
            if dest not in known:
                raise UsageError(f"unknown config key {key!r}")
            action = known[dest]
            if isinstance(value, str) and action.type is not None:
                try:
                    value = action.type(value)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {key!r}: {exc}") from None
            elif isinstance(value, str) and isinstance(action, argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes")
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# building blocks


def options_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("config",)}


def load_data(args) -> tuple[Dataset, Dataset]:
    if args.dataset == "rectangles":
        if args.train_size < 1 or args.test_size < 1:
            raise UsageError("dataset sizes must be positive")
        seeds = np.random.SeedSequence(args.data_seed).generate_state(2)
        return (gen_rectangles(args.train_size, seed=int(seeds[0]), name="rectangles-train"),
                gen_rectangles(args.test_size, seed=int(seeds[1]), name="rectangles-test"))
    data_dir = args.data_dir or (os.environ.get(MNIST_ENV) if args.dataset == "mnist" else None)
    if not data_dir:
        raise DataError(f"--data-dir is required for {args.dataset}")
    if args.dataset == "mnist":
        return load_mnist(data_dir)
    return load_idx_dir(data_dir)


def sampler_of(args, variant=None, level=None) -> SamplerConfig:
    """The sampler named by the flags, or ``variant`` placed at ``level``."""
    variant = variant or args.sampler
    shared = dict(alpha=args.alpha, K=args.lsh_k, L=args.lsh_l, probes=args.probes,
                  seed=args.seed)
    if level is not None:
        return SamplerConfig.at_level(variant, level, **shared)
    return SamplerConfig(variant, keep_prob=args.keep_prob, beta=args.beta,
                         k_frac=args.k_frac, **shared)


def train_config(args, sampler: SamplerConfig, workers=None) -> TrainConfig:
    return TrainConfig(sampler=sampler, workers=workers or args.workers, epochs=args.epochs,
                       batch_size=args.batch_size, optimizer=args.optimizer, lr=args.lr,
                       momentum=args.momentum, rehash_every=args.rehash_every, seed=args.seed,
                       eval_mode=args.eval_mode, oversubscribe=args.oversubscribe)


def new_network(args, train: Dataset) -> Network:
    return Network.create(train.feature_dim, args.layers, train.n_classes, seed=args.seed)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finite_row(row: dict) -> dict:
    for k, v in row.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError(f"non-finite value in column {k}")
    return row


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    sampler = sampler_of(args)
    cfg = train_config(args, sampler)
    train, test = load_data(args)
    out = _outdir(args)
    net = new_network(args, train)
    started = time.time()
    failure = None
    try:
        hist = train_async(net, train, cfg, test, csv_path=out / "metrics.csv",
                           on_epoch=lambda m: print(_epoch_line(m), flush=True))
    except DivergenceError as exc:
        failure, hist = exc, exc.metrics
    net.save(out / "model.hgnn")
    write_manifest(out / "manifest.json", cfg, train, {
        "command": "train", "options": options_of(args), "metrics": "metrics.csv",
        "checkpoint": "model.hgnn", "test_dataset": _fingerprint(test),
        "diverged": None if failure is None else failure.reason,
    }, started, time.time())
    if failure is not None:
        print(f"diverged: {failure.reason}", file=sys.stderr)
        return EXIT_DIVERGED
    if hist:
        print(f"final test accuracy {hist[-1].test_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = Network.load(args.checkpoint)
    _, test = load_data(args)
    if test.feature_dim != net.layers[0].n_in or test.n_classes > net.n_classes:
        raise DataError("dataset does not match the checkpoint's input or class count")
    sampler = sampler_of(args, LSH if args.mode == "sparse" else args.sampler)
    acc, details = evaluate(net, test, args.mode, sampler, seed=args.seed, return_details=True)
    if args.json:
        print(json.dumps({"accuracy": acc, "mode": args.mode, "examples": len(test), **details}))
    else:
        print(f"{args.mode} accuracy {acc:.4f} on {len(test)} examples")
    return EXIT_OK


def sweep_plan(levels, samplers) -> tuple[list[tuple[str, float]], list[dict]]:
    """Grid points to run and skipped points with reasons.  The standard
    network runs once at level 1.0."""
    plan, skipped = [], []
    for variant in samplers:
        if variant == STD:
            plan.append((STD, 1.0))
            continue
        for level in levels:
            if variant == AD and level < AD_MIN_LEVEL:
                skipped.append({"sampler": AD, "level": level,
                                "reason": f"adaptive dropout diverges below "
                                          f"{AD_MIN_LEVEL:.0%} active nodes"})
                continue
            plan.append((variant, level))
    return plan, skipped


def cmd_sweep(args) -> int:
    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]
    bad = [s for s in samplers if s not in SAMPLERS]
    if bad or not samplers:
        raise UsageError(f"unknown samplers {bad}")
    plan, skipped = sweep_plan(args.levels, samplers)
    # validate every grid point before any training
    configs = [(v, lvl, train_config(args, sampler_of(args, v, lvl))) for v, lvl in plan]
    train, test = load_data(args)
    out = _outdir(args)
    started = time.time()
    diverged = []
    fields = ("level",) + CSV_FIELDS
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for variant, level, cfg in configs:
            net = new_network(args, train)
            try:
                hist = train_async(net, train, cfg, test)
            except DivergenceError as exc:
                hist = exc.metrics
                diverged.append({"sampler": variant, "level": level, "reason": exc.reason})
            for m in hist:
                writer.writerow(_finite_row({"level": level, **m.csv_row()}))
            fh.flush()
            last = hist[-1].test_acc if hist else float("nan")
            print(f"{variant:>4} level {level:<5g} test accuracy {last:.4f}", flush=True)
    for s in skipped:
        print(f"skipped {s['sampler']} at {s['level']}: {s['reason']}")
    write_manifest(out / "manifest.json", train_config(args, sampler_of(args)), train, {
        "command": "sweep", "options": options_of(args), "metrics": "sweep.csv",
        "grid": [{"sampler": v, "level": lvl} for v, lvl in plan],
        "skipped": skipped, "diverged": diverged, "test_dataset": _fingerprint(test),
    }, started, time.time())
    return EXIT_OK


def cmd_scale(args) -> int:
    ladder = worker_ladder(args.max_workers)
    sampler = sampler_of(args)
    configs = [train_config(args, sampler, workers=P) for P in ladder]
    train, test = load_data(args)
    out = _outdir(args)
    started = time.time()
    summary = []
    base_secs = None
    with open(out / "scale.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for cfg in configs:
            net = new_network(args, train)
            try:
                hist = train_async(net, train, cfg, test)
                reason = None
            except DivergenceError as exc:
                hist, reason = exc.metrics, exc.reason
            for m in hist:
                writer.writerow(_finite_row(m.csv_row()))
            fh.flush()
            if not hist:
                summary.append({"workers": cfg.workers, "secs_per_epoch": None, "speedup": None,
                                "final_acc": None, "diverged": reason})
                continue
            # the first epoch is a warm-up unless it is the only one
            timed = hist[1:] or hist
            secs = float(np.mean([m.secs for m in timed]))
            if base_secs is None:
                base_secs = secs
            summary.append({"workers": cfg.workers, "secs_per_epoch": secs,
                            "speedup": base_secs / secs, "final_acc": hist[-1].test_acc,
                            "conflict_rate": hist[-1].conflict_rate, "diverged": reason})
            print(f"workers {cfg.workers:>3}: {secs:.3f} s/epoch, speedup "
                  f"{base_secs / secs:.2f}, accuracy {hist[-1].test_acc:.4f}", flush=True)
    with open(out / "scale_summary.csv", "w", newline="") as fh:
        fields = ("workers", "secs_per_epoch", "speedup", "final_acc", "conflict_rate")
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in summary:
            if row["speedup"] is not None:
                writer.writerow(row)
    accs = [r["final_acc"] for r in summary if r["final_acc"] is not None]
    spread = float(max(accs) - min(accs)) if accs else None
    print(f"accuracy spread across worker counts: {spread}")
    write_manifest(out / "manifest.json", configs[0], train, {
        "command": "scale", "options": options_of(args), "metrics": "scale.csv",
        "summary": summary, "accuracy_spread": spread, "ladder": ladder,
        "cores": os.cpu_count(), "test_dataset": _fingerprint(test),
    }, started, time.time())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.train_size < 1 or args.test_size < 1:
        raise UsageError("dataset sizes must be positive")
    seeds = np.random.SeedSequence(args.seed).generate_state(2)
    train = gen_rectangles(args.train_size, seed=int(seeds[0]), name="rectangles-train")
    test = gen_rectangles(args.test_size, seed=int(seeds[1]), name="rectangles-test")
    save_idx_dir(train, test, args.out_dir)
    print(f"wrote {len(train)} train and {len(test)} test rectangles to {args.out_dir}")
    return EXIT_OK


def _fingerprint(ds: Dataset) -> dict:
    return {"name": ds.name, "examples": len(ds), "sha256": ds.fingerprint()}


def _epoch_line(m) -> str:
    return (f"epoch {m.epoch}: loss {m.train_loss:.4f}, test accuracy {m.test_acc:.4f}, "
            f"active {m.active_frac:.3f}, {m.secs:.2f} s")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "scale": cmd_scale,
            "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc.reason}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, StructureError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
