"""Fully-connected layers with dense and active-set restricted passes.

Hidden layers use ReLU, the output layer is an always-dense linear
classifier trained with softmax cross-entropy.  Parameters and activations
are float32; dot products accumulate in float64.

Sparse activations are carried as ``(ids, vals)`` pairs: ``vals[s]`` is the
activation of unit ``ids[s]`` and every unit not listed is zero.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .lsh_index import DEFAULT_BUCKET_CAP, DEFAULT_K, DEFAULT_L, HashFamily, LayerIndex

RELU = "relu"
IDENTITY = "identity"
_ACT_TAGS = {IDENTITY: 0, RELU: 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}

HGNN_MAGIC = b"HGNN"
HGNN_VERSION = 1


class TrainingFault(RuntimeError):
    """A parameter or loss became non-finite."""


class StructureError(ValueError):
    """Dimension mismatch, out-of-range unit id or inconsistent trace."""


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = RELU

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float32)
        self.b = np.ascontiguousarray(self.b, dtype=np.float32)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise StructureError(f"bad layer shapes W{self.W.shape} b{self.b.shape}")
        if self.activation not in _ACT_TAGS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def check_finite(self):
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise TrainingFault("non-finite parameter in layer")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, activation: str = RELU):
        limit = math.sqrt(6.0 / (n_in + n_out))
        W = rng.uniform(-limit, limit, size=(n_out, n_in)).astype(np.float32)
        return cls(W, np.zeros(n_out, np.float32), activation)


@dataclass
class ActiveSet:
    """Selected units of one layer for one example."""

    ids: np.ndarray
    cap_fraction: float = 1.0
    source: str = "all"
    fallback: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def validate(self, n_units: int):
        ids = self.ids
        if ids.size and (ids.min() < 0 or ids.max() >= n_units):
            raise StructureError("active id out of range")
        if np.any(np.diff(ids) <= 0):
            raise StructureError("active ids must be sorted and unique")
        if ids.size > math.ceil(self.cap_fraction * n_units):
            raise StructureError("active set exceeds its cap")

    def __len__(self):
        return int(self.ids.size)


@dataclass
class SparseActivations:
    ids: np.ndarray         # active unit ids, sorted
    pre: np.ndarray         # pre-activations of those units
    act: np.ndarray         # activations of those units
    mults: int              # multiplications spent


@dataclass
class LayerTrace:
    in_ids: np.ndarray
    in_vals: np.ndarray
    active: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    scale: float = 1.0


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    logits: np.ndarray | None = None
    out_ids: np.ndarray | None = None
    out_vals: np.ndarray | None = None
    mults: int = 0

    def output_support(self, l: int):
        """(ids, vals) of the nonzero outputs of hidden layer ``l``."""
        tr = self.layers[l]
        keep = tr.act != 0.0
        return tr.active[keep], tr.act[keep]


@dataclass
class SparseGrad:
    rows: np.ndarray
    cols: np.ndarray
    dW: np.ndarray          # (len(rows), len(cols))
    db: np.ndarray          # (len(rows),)

    def dense(self, shape) -> tuple[np.ndarray, np.ndarray]:
        gW = np.zeros(shape)
        gb = np.zeros(shape[0])
        gW[np.ix_(self.rows, self.cols)] = self.dW
        gb[self.rows] = self.db
        return gW, gb


# ---------------------------------------------------------------------------
# kernels shared with the training engine


@njit(cache=True, nogil=True)
def _affine_rows(W, b, rows, nrows, in_ids, in_vals, nin, out):
    """out[u] = W[rows[u]] . x + b[rows[u]] over the sparse input support."""
    for u in range(nrows):
        r = rows[u]
        acc = 0.0
        for s in range(nin):
            acc += np.float64(W[r, in_ids[s]]) * in_vals[s]
        out[u] = acc + np.float64(b[r])


@njit(cache=True, nogil=True)
def _backprop_delta(W, rows, deltas, nrows, in_ids, nin, out):
    """out[s] = sum_u W[rows[u], in_ids[s]] * deltas[u], summed in u order."""
    for s in range(nin):
        out[s] = 0.0
    for u in range(nrows):
        r = rows[u]
        d = deltas[u]
        if d == 0.0:
            continue
        for s in range(nin):
            out[s] += np.float64(W[r, in_ids[s]]) * d


@njit(cache=True, nogil=True)
def _softmax_xent(logits, label, grad):
    """Writes softmax(logits) - onehot(label) into grad, returns the loss."""
    C = logits.shape[0]
    m = logits[0]
    for c in range(1, C):
        if logits[c] > m:
            m = logits[c]
    total = 0.0
    for c in range(C):
        e = np.exp(logits[c] - m)
        grad[c] = e
        total += e
    for c in range(C):
        grad[c] /= total
    grad[label] -= 1.0
    return np.log(total) - (logits[label] - m)


def _check_input(layer: Layer, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.n_in,):
        raise StructureError(f"input has shape {x.shape}, layer expects ({layer.n_in},)")
    return x


def forward_dense(layer: Layer, x) -> np.ndarray:
    """Full affine map plus activation; the reference for ``forward_sparse``."""
    x = _check_input(layer, x)
    rows = np.arange(layer.n_out, dtype=np.int64)
    cols = np.arange(layer.n_in, dtype=np.int64)
    z = np.empty(layer.n_out)
    _affine_rows(layer.W, layer.b, rows, len(rows), cols, x, len(cols), z)
    return np.maximum(z, 0.0) if layer.activation == RELU else z


def forward_sparse(layer: Layer, in_ids, in_vals, active) -> SparseActivations:
    """Compute only the units in ``active`` from a sparse input.

    ``active`` may be an :class:`ActiveSet` or an id array.
    """
    ids = active.ids if isinstance(active, ActiveSet) else np.asarray(active, dtype=np.int64)
    in_ids = np.asarray(in_ids, dtype=np.int64)
    in_vals = np.asarray(in_vals, dtype=np.float64)
    if ids.size and (ids.min() < 0 or ids.max() >= layer.n_out):
        raise StructureError("active id out of range")
    if in_ids.size and (in_ids.min() < 0 or in_ids.max() >= layer.n_in):
        raise StructureError("input id out of range")
    z = np.empty(ids.size)
    _affine_rows(layer.W, layer.b, ids, ids.size, in_ids, in_vals, in_ids.size, z)
    a = np.maximum(z, 0.0) if layer.activation == RELU else z.copy()
    return SparseActivations(ids, z, a, int(ids.size * in_ids.size))


def output_loss_grad(logits, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy loss and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise StructureError(f"label {label} out of range for {logits.size} classes")
    grad = np.empty(logits.size)
    loss = _softmax_xent(logits, label, grad)
    return float(loss), grad


class Network:
    """Hidden ReLU layers plus a dense linear output layer.

    Each hidden layer owns a :class:`HashFamily` and a :class:`LayerIndex`
    over its ``[W[i], b[i]]`` rows, created by :meth:`build_indices`.
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise StructureError("a network needs at least an output layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise StructureError("adjacent layer dimensions are incompatible")
        self.layers = layers
        self.families: list[HashFamily | None] = [None] * self.n_hidden
        self.indices: list[LayerIndex | None] = [None] * self.n_hidden

    @classmethod
    def create(cls, n_in: int, hidden: list[int] | tuple[int, ...], n_classes: int,
               seed: int = 0) -> "Network":
        rng = np.random.default_rng(seed)
        sizes = [n_in, *hidden]
        layers = [Layer.init(a, b, rng, RELU) for a, b in zip(sizes, sizes[1:])]
        layers.append(Layer.init(sizes[-1], n_classes, rng, IDENTITY))
        return cls(layers)

    @property
    def n_hidden(self) -> int:
        return len(self.layers) - 1

    @property
    def hidden(self) -> list[Layer]:
        return self.layers[:-1]

    @property
    def output(self) -> Layer:
        return self.layers[-1]

    @property
    def n_classes(self) -> int:
        return self.output.n_out

    def build_indices(self, K: int = DEFAULT_K, L: int = DEFAULT_L, seed: int = 0,
                      bucket_cap: int = DEFAULT_BUCKET_CAP) -> None:
        for l, layer in enumerate(self.hidden):
            fam = HashFamily(seed * 1009 + l, K, L, layer.n_in + 3)
            self.families[l] = fam
            self.indices[l] = LayerIndex.build_from_layer(layer.W, layer.b, fam,
                                                          bucket_cap=bucket_cap)

    def has_indices(self, K: int, L: int) -> bool:
        return all(f is not None and f.K == K and f.L == L for f in self.families)

    def copy(self) -> "Network":
        return Network([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def check_finite(self):
        for layer in self.layers:
            layer.check_finite()

    def forward_dense(self, x) -> np.ndarray:
        a = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            a = forward_dense(layer, a)
        return a

    def predict_dense(self, X, chunk: int = 4096) -> np.ndarray:
        """Batched dense logits in float64."""
        X = np.asarray(X)
        out = np.empty((X.shape[0], self.n_classes))
        params = [(l.W.astype(np.float64), l.b.astype(np.float64), l.activation)
                  for l in self.layers]
        for start in range(0, X.shape[0], chunk):
            a = X[start:start + chunk].astype(np.float64)
            for W, b, act in params:
                a = a @ W.T + b
                if act == RELU:
                    np.maximum(a, 0.0, out=a)
            out[start:start + chunk] = a
        return out

    # -- checkpoint -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<4sII", HGNN_MAGIC, HGNN_VERSION, len(self.layers))]
        for layer in self.layers:
            parts.append(struct.pack("<IIB", layer.n_in, layer.n_out, _ACT_TAGS[layer.activation]))
            parts.append(layer.W.astype("<f4").tobytes(order="C"))
            parts.append(layer.b.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Network":
        mv = memoryview(buf)
        try:
            magic, version, count = struct.unpack_from("<4sII", mv, 0)
        except struct.error as exc:
            raise StructureError("truncated HGNN header") from exc
        if magic != HGNN_MAGIC:
            raise StructureError(f"bad checkpoint magic {magic!r}")
        if version != HGNN_VERSION:
            raise StructureError(f"unsupported checkpoint version {version}")
        off = 12
        layers = []
        try:
            for _ in range(count):
                n_in, n_out, tag = struct.unpack_from("<IIB", mv, off)
                off += 9
                W = np.frombuffer(mv, "<f4", n_in * n_out, off).reshape(n_out, n_in)
                off += 4 * n_in * n_out
                b = np.frombuffer(mv, "<f4", n_out, off)
                off += 4 * n_out
                layers.append(Layer(W.copy(), b.copy(), _TAG_ACTS[tag]))
        except (struct.error, ValueError, KeyError) as exc:
            raise StructureError("malformed HGNN body") from exc
        if off != len(mv):
            raise StructureError("trailing bytes after checkpoint")
        return cls(layers)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def forward_trace(net: Network, x, active_sets, scales=None) -> ForwardTrace:
    """Forward pass restricted to the given per-hidden-layer active sets.

    ``scales[l]`` multiplies layer l's activations (inverted dropout).
    """
    x = np.asarray(x, dtype=np.float64)
    if len(active_sets) != net.n_hidden:
        raise StructureError("need one active set per hidden layer")
    trace = ForwardTrace()
    in_ids = np.arange(x.size, dtype=np.int64)
    in_vals = x
    for l, layer in enumerate(net.hidden):
        sa = forward_sparse(layer, in_ids, in_vals, active_sets[l])
        scale = 1.0 if scales is None else float(scales[l])
        act = sa.act * scale if scale != 1.0 else sa.act
        trace.layers.append(LayerTrace(in_ids, in_vals, sa.ids, sa.pre, act, scale))
        trace.mults += sa.mults
        in_ids, in_vals = trace.output_support(l)
    out = net.output
    ids = np.arange(out.n_out, dtype=np.int64)
    logits = np.empty(out.n_out)
    _affine_rows(out.W, out.b, ids, ids.size, in_ids, in_vals, in_ids.size, logits)
    trace.logits = logits
    trace.out_ids, trace.out_vals = in_ids, in_vals
    return trace


def backward_sparse(net: Network, trace: ForwardTrace, dlogits) -> list[SparseGrad]:
    """Gradients restricted to active rows and active input columns.

    Returns one :class:`SparseGrad` per layer, output layer last.
    """
    if len(trace.layers) != net.n_hidden or trace.logits is None:
        raise StructureError("trace does not match the network")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (net.n_classes,):
        raise StructureError("dlogits has the wrong shape")
    grads: list[SparseGrad] = [None] * len(net.layers)

    in_ids, in_vals = trace.out_ids, trace.out_vals
    out = net.output
    rows = np.arange(out.n_out, dtype=np.int64)
    grads[-1] = SparseGrad(rows, in_ids, np.outer(dlogits, in_vals), dlogits.copy())
    delta = np.empty(in_ids.size)
    _backprop_delta(out.W, rows, dlogits, rows.size, in_ids, in_ids.size, delta)

    for l in range(net.n_hidden - 1, -1, -1):
        tr = trace.layers[l]
        layer = net.layers[l]
        # delta is aligned with layer l's nonzero outputs; ReLU' = 1 there
        rows = tr.active[tr.act != 0.0]
        d = delta * tr.scale
        grads[l] = SparseGrad(rows, tr.in_ids, np.outer(d, tr.in_vals), d.copy())
        if l > 0:
            delta = np.empty(tr.in_ids.size)
            _backprop_delta(layer.W, rows, d, rows.size, tr.in_ids, tr.in_ids.size, delta)
    return grads


def masked_loss(net: Network, x, label: int, active_sets, scales=None) -> float:
    """Loss of the network with inactive units clamped to zero."""
    trace = forward_trace(net, x, active_sets, scales)
    return output_loss_grad(trace.logits, label)[0]
