"""Sequential and Hogwild-style asynchronous training.

Workers are Python threads, each running the compiled shard loop with the
GIL released.  They share parameters, optimizer state and LSH indices; only
bucket mutation inside an index is serialised, per table.  At the end of an
epoch all workers join, the indices are reconciled exactly with the
weights, and metrics are computed.
"""
from __future__ import annotations

import csv
import json
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba.typed import List
from scipy.special import expit

from . import __version__
from ._engine import (N_STATS, ST_AD_GUARDS, ST_DENSE_MULTS, ST_DIVERGED, ST_EXAMPLES,
                      ST_FALLBACKS, ST_HASH_MULTS, ST_LOSS, ST_MOVES, ST_MULTS,
                      ST_OUT_MULTS, ST_RECORDED, ST_UPDATES, ST_VISITED, predict_lsh,
                      train_shard)
from .data import Dataset, split_shards
from .lsh_index import HashFamily, LayerIndex
from .network import ActiveSet, Network, StructureError, TrainingFault
from .optimizer import DEFAULT_EPS, DEFAULT_GAMMA, NetworkOptimizer
from .samplers import AD, LSH, STD, VD, WTA, SamplerConfig

CSV_FIELDS = ("epoch", "workers", "sampler", "k_frac", "train_loss", "test_acc", "secs",
              "mults", "active_frac", "conflict_rate",
              "dense_mults", "output_mults", "hash_mults", "fallbacks", "repairs")
CSV_SCHEMA = "hashprop-metrics/1"
MANIFEST_SCHEMA = "hashprop-run/1"
EVAL_MODES = ("auto", "dense", "sparse", "wta", "ad")


_DIVERGED_REASONS = {1: "non-finite loss", 2: "non-finite parameter after update",
                     3: "non-finite hidden pre-activation"}


class ConfigError(ValueError):
    pass


class DivergenceError(TrainingFault):
    """Training was aborted; ``metrics`` holds the epochs completed so far."""

    def __init__(self, reason: str, metrics=None):
        super().__init__(reason)
        self.reason = reason
        self.metrics = list(metrics or [])


@dataclass
class TrainConfig:
    """``sampler`` is one config shared by all hidden layers or one per layer.

    ``batch_size=None`` picks 32 for the standard sampler and 1 otherwise.
    """

    sampler: SamplerConfig | tuple = field(default_factory=SamplerConfig)
    workers: int = 1
    epochs: int = 1
    batch_size: int | None = None
    optimizer: str = "adagrad"
    lr: float = 1e-2
    momentum: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS
    rehash_every: int = 1
    seed: int = 0
    eval_mode: str = "auto"
    conflict_samples: int = 256
    divergence_epochs: int = 5
    divergence_factor: float = 1.5
    oversubscribe: bool = False

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.rehash_every < 1:
            raise ConfigError("rehash_every must be >= 1")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES}")
        if not self.oversubscribe and self.workers > (os.cpu_count() or 1):
            raise ConfigError(f"{self.workers} workers exceed the {os.cpu_count()} available cores")
        try:
            NetworkOptimizer(self.optimizer, self.lr, self.momentum, self.eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def primary(self) -> SamplerConfig:
        return self.sampler[0] if isinstance(self.sampler, (tuple, list)) else self.sampler

    @property
    def batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 32 if self.primary.variant == STD else 1

    def samplers_for(self, n_hidden: int) -> list[SamplerConfig]:
        if isinstance(self.sampler, (tuple, list)):
            if len(self.sampler) != n_hidden:
                raise ConfigError("need one sampler config per hidden layer")
            return list(self.sampler)
        return [self.sampler] * n_hidden

    def resolved_eval_mode(self) -> str:
        if self.eval_mode != "auto":
            return self.eval_mode
        return {LSH: "sparse", WTA: "wta", AD: "ad"}.get(self.primary.variant, "dense")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_size"] = self.batch
        d["eval_mode"] = self.resolved_eval_mode()
        return d


@dataclass
class EpochMetrics:
    epoch: int
    workers: int
    sampler: str
    k_frac: float
    train_loss: float
    test_acc: float
    secs: float
    mults: int
    active_frac: float
    conflict_rate: float
    active_frac_per_layer: tuple = ()
    dense_mults: int = 0
    output_mults: int = 0
    hash_mults: int = 0
    fallbacks: int = 0
    ad_guards: int = 0
    rehash_moves: int = 0
    repairs: int = 0
    examples: int = 0
    updates: int = 0

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


@dataclass
class StepResult:
    active_sets: list[ActiveSet]
    loss: float


def _seed32(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
               .generate_state(1)[0] & 0x7FFFFFFF)


def ensure_indices(net: Network, samplers: list[SamplerConfig], seed: int = 0) -> None:
    """Build a layer's index unless one with matching (K, L) exists."""
    for l, s in enumerate(samplers):
        fam = net.families[l]
        if fam is None or fam.K != s.K or fam.L != s.L:
            layer = net.layers[l]
            fam = HashFamily(seed * 1009 + l, s.K, s.L, layer.n_in + 3)
            net.families[l] = fam
            net.indices[l] = LayerIndex.build_from_layer(layer.W, layer.b, fam)


class Trainer:
    """Binds a network, its optimizer state and per-layer samplers to the
    compiled training loop."""

    def __init__(self, net: Network, samplers: list[SamplerConfig],
                 optimizer: NetworkOptimizer | None = None, batch_size: int = 1,
                 rehash_every: int = 1, index_seed: int = 0):
        if net.n_hidden < 1:
            raise StructureError("training needs at least one hidden layer")
        if len(samplers) != net.n_hidden:
            raise ConfigError("need one sampler config per hidden layer")
        self.net = net
        self.samplers = list(samplers)
        self.opt = optimizer if optimizer is not None else NetworkOptimizer().attach(net)
        if len(self.opt.weights) != len(net.layers):
            self.opt.attach(net)
        self.batch_size = batch_size
        self.rehash_every = rehash_every
        ensure_indices(net, self.samplers, index_seed)

        layers, opt = net.layers, self.opt
        self._Ws = List([l.W for l in layers])
        self._Bs = List([l.b for l in layers])
        self._VW = List([s.velocity for s in opt.weights])
        self._GW = List([s.accum for s in opt.weights])
        self._TW = List([s.last for s in opt.weights])
        self._VB = List([s.velocity for s in opt.biases])
        self._GB = List([s.accum for s in opt.biases])
        self._TB = List([s.last for s in opt.biases])
        self._ixs = List([ix._arrays for ix in net.indices])
        hidden = net.hidden
        self._scode = np.array([s.code for s in samplers], np.int64)
        self._skeep = np.array([s.keep_prob for s in samplers])
        self._salpha = np.array([s.alpha for s in samplers])
        self._sbeta = np.array([s.beta for s in samplers])
        self._scap = np.array([s.cap(h.n_out) for s, h in zip(samplers, hidden)], np.int64)
        self._sprobes = np.array([s.probes for s in samplers], np.int64)
        self._maintain = np.array([s.variant == LSH for s in samplers], np.uint8)
        self.total_rows = sum(h.n_out for h in hidden)

    @property
    def maintains_index(self) -> bool:
        return bool(self._maintain.any())

    def _new_outputs(self, n_records: int):
        H = self.net.n_hidden
        return dict(
            rec=np.zeros((max(n_records, 1), self.total_rows), np.int32),
            rec_n=np.zeros(max(n_records, 1), np.int32),
            act_sum=np.zeros(H),
            last_ids=List([np.zeros(h.n_out, np.int64) for h in self.net.hidden]),
            last_n=np.zeros(H, np.int64),
            stats=np.zeros(N_STATS),
        )

    def run_shard(self, data: Dataset, order, seed: int, n_records: int = 0) -> dict:
        """Train on ``data[order]`` in this thread.  Returns the raw outputs."""
        order = np.ascontiguousarray(order, dtype=np.int64)
        out = self._new_outputs(n_records)
        n_updates = -(-order.size // self.batch_size)
        stride = max(1, n_updates // n_records) if n_records > 0 else 0
        opt = self.opt
        train_shard(data.X, data.y, order, self._Ws, self._Bs, self._VW, self._GW, self._TW,
                    self._VB, self._GB, self._TB, opt.clock, opt.code, float(opt.eta),
                    float(opt.gamma), float(opt.eps), self._scode, self._skeep, self._salpha,
                    self._sbeta, self._scap, self._sprobes, self._maintain, self._ixs,
                    self.batch_size, self.rehash_every, seed, out["rec"], out["rec_n"],
                    stride, out["act_sum"], out["last_ids"], out["last_n"], out["stats"])
        return out

    def step(self, x, label: int, seed: int = 0) -> StepResult:
        """One example, one update (the pending gradient is always flushed)."""
        x = np.asarray(x, dtype=np.float32).reshape(1, -1)
        if x.shape[1] != self.net.layers[0].n_in:
            raise StructureError("example has the wrong feature dimension")
        if not 0 <= label < self.net.n_classes:
            raise StructureError("label out of range")
        data = _RawData(x, np.array([label], np.int64))
        out = self.run_shard(data, np.zeros(1, np.int64), seed)
        st = out["stats"]
        if st[ST_DIVERGED]:
            raise DivergenceError(_DIVERGED_REASONS[int(st[ST_DIVERGED])])
        sets = [ActiveSet(out["last_ids"][l][:out["last_n"][l]].copy(),
                          1.0 if s.variant in (STD, VD, AD) else s.k_frac, s.variant)
                for l, s in enumerate(self.samplers)]
        return StepResult(sets, float(st[ST_LOSS]))


@dataclass
class _RawData:
    X: np.ndarray
    y: np.ndarray


def train_step(net: Network, example, sampler, optimizer: NetworkOptimizer,
               seed: int = 0, rehash_every: int = 1) -> StepResult:
    """Single-example update.  ``sampler`` is a config or a per-layer list."""
    x, label = example
    samplers = sampler if isinstance(sampler, (list, tuple)) else [sampler] * net.n_hidden
    return Trainer(net, samplers, optimizer, 1, rehash_every).step(x, label, seed)


def conflict_rate(records: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean fraction of a worker's touched rows that another worker also
    touched in the same sampling window.  ``records`` holds one
    (rows, counts) pair per worker."""
    if len(records) < 2:
        return 0.0
    windows = min(r[1].shape[0] for r in records)
    fracs = []
    for k in range(windows):
        sets = [r[0][k, :r[1][k]] for r in records]
        for w, rows in enumerate(sets):
            if rows.size == 0:
                continue
            others = [s for v, s in enumerate(sets) if v != w and s.size]
            if not others:
                fracs.append(0.0)
                continue
            fracs.append(float(np.isin(rows, np.concatenate(others)).mean()))
    return float(np.mean(fracs)) if fracs else 0.0


def refresh_indices(net: Network, trainer: Trainer) -> int:
    """Exact reconciliation of maintained indices; returns neurons repaired
    (a full rebuild counts every neuron)."""
    repairs = 0
    for l, ix in enumerate(net.indices):
        if not trainer._maintain[l]:
            continue
        layer = net.layers[l]
        moved = ix.refresh(W=layer.W, b=layer.b)
        repairs += ix.n if moved < 0 else moved
    return repairs


def train_async(net: Network, train: Dataset, cfg: TrainConfig, test: Dataset | None = None,
                optimizer: NetworkOptimizer | None = None, csv_path=None,
                evaluate_each_epoch: bool = True, on_epoch=None) -> list[EpochMetrics]:
    """Train for ``cfg.epochs`` epochs with ``cfg.workers`` lock-free workers."""
    samplers = cfg.samplers_for(net.n_hidden)
    opt = optimizer or NetworkOptimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.eps).attach(net)
    trainer = Trainer(net, samplers, opt, cfg.batch, cfg.rehash_every, cfg.seed)
    eval_set = test if test is not None else train
    mode = cfg.resolved_eval_mode()
    primary = cfg.primary
    history: list[EpochMetrics] = []
    writer = None
    fh = open(csv_path, "w", newline="") if csv_path else None
    try:
        if fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
        for epoch in range(1, cfg.epochs + 1):
            shards = split_shards(len(train), cfg.workers, _seed32(cfg.seed, epoch))
            seeds = [_seed32(cfg.seed, epoch, w, 7) for w in range(cfg.workers)]
            n_rec = cfg.conflict_samples if cfg.workers > 1 else 0
            t0 = time.perf_counter()
            outs = _run_workers(trainer, train, shards, seeds, n_rec)
            secs = time.perf_counter() - t0

            stats = np.sum([o["stats"] for o in outs], axis=0)
            flag = max(o["stats"][ST_DIVERGED] for o in outs)
            m = _metrics(epoch, cfg, primary, outs, stats, secs, net)
            if flag:
                reason = _DIVERGED_REASONS[int(flag)]
                raise DivergenceError(f"epoch {epoch}: {reason}", history)
            if trainer.maintains_index:
                m.repairs = refresh_indices(net, trainer)
            if evaluate_each_epoch:
                m.test_acc = evaluate(net, eval_set, mode, primary, seed=_seed32(cfg.seed, epoch, 99))
            history.append(m)
            if writer:
                writer.writerow(m.csv_row())
                fh.flush()
            if on_epoch:
                on_epoch(m)
            if (evaluate_each_epoch and epoch >= cfg.divergence_epochs
                    and m.test_acc < cfg.divergence_factor / net.n_classes):
                raise DivergenceError(
                    f"epoch {epoch}: test accuracy {m.test_acc:.4f} below "
                    f"{cfg.divergence_factor}x random guessing", history)
    finally:
        if fh:
            fh.close()
    return history


def _run_workers(trainer: Trainer, data: Dataset, shards, seeds, n_rec) -> list[dict]:
    if len(shards) == 1:
        return [trainer.run_shard(data, shards[0], seeds[0], n_rec)]
    outs: list = [None] * len(shards)
    errors: list = []

    def work(w):
        try:
            outs[w] = trainer.run_shard(data, shards[w], seeds[w], n_rec)
        except BaseException as exc:  # surfaced in the caller
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(w,)) for w in range(len(shards))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return outs


def _metrics(epoch, cfg, primary, outs, stats, secs, net) -> EpochMetrics:
    n = max(stats[ST_EXAMPLES], 1.0)
    # active counts are summed as integers and divided once
    widths = np.array([h.n_out for h in net.hidden], np.float64)
    per_layer = tuple(float(v) for v in
                      np.sum([o["act_sum"] for o in outs], axis=0) / (n * widths))
    records = [(o["rec"], o["rec_n"][:int(o["stats"][ST_RECORDED])]) for o in outs]
    return EpochMetrics(
        epoch=epoch, workers=cfg.workers, sampler=primary.variant,
        k_frac=float(primary.level()), train_loss=float(stats[ST_LOSS] / n),
        test_acc=float("nan"), secs=secs, mults=int(stats[ST_MULTS]),
        active_frac=float(np.mean(per_layer)), conflict_rate=conflict_rate(records),
        active_frac_per_layer=per_layer, dense_mults=int(stats[ST_DENSE_MULTS]),
        output_mults=int(stats[ST_OUT_MULTS]), hash_mults=int(stats[ST_HASH_MULTS]),
        fallbacks=int(stats[ST_FALLBACKS]), ad_guards=int(stats[ST_AD_GUARDS]),
        rehash_moves=int(stats[ST_MOVES]), examples=int(stats[ST_EXAMPLES]),
        updates=int(stats[ST_UPDATES]))


# ---------------------------------------------------------------------------
# inference


def _dense_hidden(net: Network, X, layer_fn=None):
    a = np.asarray(X, dtype=np.float64)
    for l, layer in enumerate(net.hidden):
        z = a @ layer.W.T.astype(np.float64) + layer.b
        a = np.maximum(z, 0.0) if layer_fn is None else layer_fn(l, z)
    out = net.output
    return a @ out.W.T.astype(np.float64) + out.b


def evaluate(net: Network, data: Dataset, mode: str = "dense",
             sampler: SamplerConfig | list | None = None, seed: int = 0,
             return_details: bool = False):
    """Top-1 accuracy.

    ``dense`` runs the full network; ``sparse`` uses LSH active sets in every
    hidden layer (indices are built if missing); ``wta`` keeps the top-k
    activations per layer; ``ad`` scales activations by their adaptive
    keep probability.
    """
    samplers = (sampler if isinstance(sampler, (list, tuple))
                else [sampler or SamplerConfig(LSH if mode == "sparse" else STD)] * net.n_hidden)
    details = {}
    if mode == "dense":
        logits = net.predict_dense(data.X)
        pred = logits.argmax(axis=1)
    elif mode == "sparse":
        ensure_indices(net, samplers)
        X = np.ascontiguousarray(data.X)
        pred = np.zeros(X.shape[0], np.int64)
        stats = np.zeros(N_STATS)
        caps = np.array([s.cap(h.n_out) for s, h in zip(samplers, net.hidden)], np.int64)
        probes = np.array([s.probes for s in samplers], np.int64)
        predict_lsh(X, List([l.W for l in net.layers]), List([l.b for l in net.layers]),
                    List([ix._arrays for ix in net.indices]), probes, caps, seed, pred, stats)
        details = {"mults": int(stats[ST_MULTS]), "output_mults": int(stats[ST_OUT_MULTS]),
                   "hash_mults": int(stats[ST_HASH_MULTS]),
                   "fallbacks": int(stats[ST_FALLBACKS]), "buckets": int(stats[ST_VISITED])}
    elif mode == "wta":
        def top_k(l, z):
            a = np.maximum(z, 0.0)
            k = samplers[l].cap(a.shape[1])
            if k < a.shape[1]:
                thresh = -np.partition(-a, k - 1, axis=1)[:, k - 1:k]
                a = np.where(a >= thresh, a, 0.0)
            return a
        pred = _dense_hidden(net, data.X, top_k).argmax(axis=1)
    elif mode == "ad":
        def expect(l, z):
            s = samplers[l]
            return np.maximum(z, 0.0) * expit(s.alpha * z + s.beta)
        pred = _dense_hidden(net, data.X, expect).argmax(axis=1)
    else:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    acc = float(np.mean(pred == data.y))
    return (acc, details) if return_details else acc


# ---------------------------------------------------------------------------
# benchmarking and run records


def worker_ladder(max_workers: int | None = None) -> list[int]:
    """1, 2, 4, ... up to ``max_workers`` (default: core count), which is
    appended when it is not a power of two."""
    top = max_workers or os.cpu_count() or 1
    ladder, p = [], 1
    while p <= top:
        ladder.append(p)
        p *= 2
    if ladder[-1] != top:
        ladder.append(top)
    return ladder


def throughput_benchmark(net: Network, data: Dataset, worker_counts, cfg: TrainConfig,
                         timed_epochs: int = 1) -> list[dict]:
    """Seconds per epoch and speedup over one worker for each worker count.

    Every configuration starts from a copy of ``net`` and trains
    ``1 + timed_epochs`` epochs over the full dataset; the first epoch is a
    warm-up and is not timed.
    """
    rows = []
    base = None
    for P in worker_counts:
        run = replace(cfg, workers=int(P), epochs=1 + timed_epochs, oversubscribe=True)
        hist = train_async(net.copy(), data, run, evaluate_each_epoch=False)
        secs = float(np.mean([m.secs for m in hist[1:]]))
        if base is None:
            base = secs
        rows.append({"workers": int(P), "secs_per_epoch": secs, "speedup": base / secs,
                     "conflict_rate": hist[-1].conflict_rate})
    return rows


def write_manifest(path, cfg: TrainConfig, dataset: Dataset | None = None, extra=None,
                   started: float | None = None, finished: float | None = None) -> dict:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "metrics_schema": CSV_SCHEMA,
        "version": __version__,
        "seed": cfg.seed,
        "config": _jsonable(cfg.to_dict()),
        "dataset": None if dataset is None else {
            "name": dataset.name, "examples": len(dataset),
            "feature_dim": dataset.feature_dim, "classes": dataset.n_classes,
            "sha256": dataset.fingerprint()},
        "started": started,
        "finished": finished,
    }
    if extra:
        manifest.update(_jsonable(extra))
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, allow_nan=False)
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
