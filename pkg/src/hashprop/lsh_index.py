"""Asymmetric sign-random-projection LSH index over a layer's neurons.

Each indexed vector ``v`` (a neuron's weight row, optionally with its bias
appended) is mapped to ``[v * U / max_norm, sqrt(1 - |v * U / max_norm|^2), 0]``
and each query ``x`` to ``[x / |x|, 0, 0]``.  The inner product of the two
transformed vectors is ``U * v.x / (max_norm * |x|)`` so the angular
collision probability of a sign projection grows with ``v.x``.

Storage is array based so that the numba training kernels can query and
mutate it without the GIL:

* one open-addressing map per table, fingerprint -> bucket slot
  (linear probing, backward-shift deletion, so no tombstones);
* bucket slots holding neuron ids in flat arrays with swap-remove deletion;
* per-neuron cached raw projections, which lets weight updates be folded
  into the fingerprints incrementally.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

from ._sync import MUTEX_BYTES, mutex_lock, mutex_unlock, new_mutexes

U_SCALE = 0.83
DEFAULT_K = 6
DEFAULT_L = 5
DEFAULT_PROBES = 10
DEFAULT_BUCKET_CAP = 128
MAX_FLIPS = 2
REBUILD_GROWTH = 1.10

LSHX_MAGIC = b"LSHX"
LSHX_VERSION = 1
_LSHX_HEADER = struct.Struct("<4sIIIId")

_EMPTY = -1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)

# positions inside the fparams / iparams arrays of an index tuple
_F_MAX_NORM, _F_OBSERVED, _F_U = 0, 1, 2
_I_K, _I_L, _I_BUCKET_CAP, _I_DIM = 0, 1, 2, 3


class DegenerateVectorError(ValueError):
    """A zero vector was given where a direction is required."""


class IndexStructureError(ValueError):
    """Dimension mismatch, unknown neuron id or malformed serialized index."""


class EmptyIndexError(ValueError):
    """An index was requested over zero neurons."""


@dataclass(frozen=True)
class HashFamily:
    """``K * L`` Gaussian projection directions derived from ``seed``.

    ``dim`` is the augmented dimension, i.e. the indexed vector length plus 2.
    """

    seed: int
    K: int
    L: int
    dim: int

    def __post_init__(self):
        if not 1 <= self.K <= 32:
            raise ValueError(f"K must be in 1..32, got {self.K}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.dim < 3:
            raise ValueError(f"augmented dim must be >= 3, got {self.dim}")

    @cached_property
    def projections(self) -> np.ndarray:
        """Array of shape (L, K, dim); row ``[j, i]`` hashes bit i of table j."""
        rng = np.random.default_rng(self.seed)
        proj = rng.standard_normal((self.L, self.K, self.dim))
        # a zero direction has probability 0 but would make a constant bit
        dead = ~np.any(proj != 0.0, axis=2)
        proj[dead, 0] = 1.0
        proj.setflags(write=False)
        return proj

    @cached_property
    def projections_t(self) -> np.ndarray:
        """Array of shape (dim, L*K), column ``j*K + i`` is bit i of table j."""
        pt = np.ascontiguousarray(self.projections.reshape(self.L * self.K, self.dim).T)
        pt.setflags(write=False)
        return pt


def data_transform(w, max_norm: float, u: float = U_SCALE) -> np.ndarray:
    """Augment a stored vector for MIPS: scale by ``u/max_norm``, append the
    norm-completing coordinate, then a zero."""
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise DegenerateVectorError("cannot hash a zero-norm weight vector")
    if max_norm < norm * (1 - 1e-12):
        raise ValueError(f"max_norm {max_norm} is below the vector norm {norm}")
    scaled = w * (u / max_norm)
    rest = max(0.0, 1.0 - float(scaled @ scaled))
    return np.concatenate([scaled, [math.sqrt(rest), 0.0]])


def query_transform(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise DegenerateVectorError("cannot hash a zero query; use a random active set")
    return np.concatenate([x / norm, [0.0, 0.0]])


def fingerprint(v, family: HashFamily, table: int) -> int:
    """K-bit sign fingerprint of an augmented vector in one table."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (family.dim,):
        raise IndexStructureError(f"expected vector of length {family.dim}, got {v.shape}")
    if not 0 <= table < family.L:
        raise IndexStructureError(f"table {table} out of range for L={family.L}")
    dots = family.projections[table] @ v
    return int(sum(1 << i for i in range(family.K) if dots[i] >= 0.0))


def collision_probability(x, y) -> float:
    """Sign-random-projection collision probability ``1 - angle(x, y) / pi``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateVectorError("collision probability undefined for zero vectors")
    ux, uy = x / nx, y / ny
    # atan2 form stays accurate for nearly parallel vectors, unlike acos
    angle = 2.0 * math.atan2(np.linalg.norm(ux - uy), np.linalg.norm(ux + uy))
    return 1.0 - angle / math.pi


def retrieval_probability(p: float, K: int, L: int, r: float = 1.0) -> float:
    """Chance a (K, L) index retrieves an item whose per-bit collision
    probability is ``p``, with buckets subsampled at rate ``r``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"r must lie in (0, 1], got {r}")
    if K < 1 or L < 1:
        raise ValueError("K and L must be positive")
    return 1.0 - (1.0 - (r * p) ** K) ** L


# ---------------------------------------------------------------------------
# numba primitives.  An index is the tuple built by ``LayerIndex._arrays``:
#   (pt, cache, sqn, fp, slot_of, pos, members, counts, slot_key,
#    free, nfree, mkeys, mvals, locks, fparams, iparams)


@njit(cache=True, nogil=True)
def _home(key, mask):
    h = np.uint64(key) * _GOLDEN
    return np.int64((h >> np.uint64(29)) & np.uint64(mask))


@njit(cache=True, nogil=True)
def _map_find(keys, key):
    mask = keys.shape[0] - 1
    h = _home(key, mask)
    for _ in range(keys.shape[0]):
        k = keys[h]
        if k == key:
            return h
        if k == _EMPTY:
            return -1
        h = (h + 1) & mask
    return -1


@njit(cache=True, nogil=True)
def _map_insert(keys, vals, key, val):
    mask = keys.shape[0] - 1
    h = _home(key, mask)
    while keys[h] != _EMPTY:
        h = (h + 1) & mask
    vals[h] = val
    keys[h] = key


@njit(cache=True, nogil=True)
def _map_delete(keys, vals, at):
    mask = keys.shape[0] - 1
    i = at
    while True:
        keys[i] = _EMPTY
        j = i
        while True:
            j = (j + 1) & mask
            kj = keys[j]
            if kj == _EMPTY:
                return
            h = _home(kj, mask)
            if i <= j:
                stays = i < h <= j
            else:
                stays = h > i or h <= j
            if not stays:
                vals[i] = vals[j]
                keys[i] = kj
                i = j
                break


@njit(cache=True, nogil=True)
def _table_insert(ix, j, i, f):
    fp, slot_of, pos, members, counts, slot_key = ix[3], ix[4], ix[5], ix[6], ix[7], ix[8]
    free, nfree, mkeys, mvals = ix[9], ix[10], ix[11], ix[12]
    at = _map_find(mkeys[j], f)
    if at >= 0:
        s = mvals[j, at]
    else:
        nfree[j] -= 1
        s = free[j, nfree[j]]
        counts[j, s] = 0
        slot_key[j, s] = f
        _map_insert(mkeys[j], mvals[j], f, s)
    c = counts[j, s]
    members[j, s, c] = i
    pos[j, i] = c
    slot_of[j, i] = s
    fp[j, i] = f
    counts[j, s] = c + 1


@njit(cache=True, nogil=True)
def _table_remove(ix, j, i):
    slot_of, pos, members, counts, slot_key = ix[4], ix[5], ix[6], ix[7], ix[8]
    free, nfree, mkeys, mvals = ix[9], ix[10], ix[11], ix[12]
    s = slot_of[j, i]
    p = pos[j, i]
    last = counts[j, s] - 1
    moved = members[j, s, last]
    members[j, s, p] = moved
    pos[j, moved] = p
    counts[j, s] = last
    slot_of[j, i] = -1
    if last == 0:
        at = _map_find(mkeys[j], slot_key[j, s])
        _map_delete(mkeys[j], mvals[j], at)
        free[j, nfree[j]] = s
        nfree[j] += 1


@njit(cache=True, nogil=True)
def _clear_tables(ix):
    slot_of, counts, free, nfree, mkeys = ix[4], ix[7], ix[9], ix[10], ix[11]
    L, S = counts.shape
    for j in range(L):
        for s in range(S):
            counts[j, s] = 0
            free[j, s] = S - 1 - s
        nfree[j] = S
        mkeys[j, :] = _EMPTY
        slot_of[j, :] = -1


@njit(cache=True, nogil=True)
def _data_bits(ix, i, j):
    pt, cache, sqn, fparams, iparams = ix[0], ix[1], ix[2], ix[14], ix[15]
    K = iparams[_I_K]
    d = iparams[_I_DIM]
    scale = fparams[_F_U] / fparams[_F_MAX_NORM]
    rest = 1.0 - scale * scale * sqn[i]
    aug = np.sqrt(rest) if rest > 0.0 else 0.0
    f = 0
    for k in range(K):
        t = j * K + k
        if scale * cache[i, t] + pt[d, t] * aug >= 0.0:
            f |= 1 << k
    return f


@njit(cache=True, nogil=True)
def _cache_rows(ix, vecs):
    """Recompute raw projections and squared norms from (n, d) vectors."""
    pt, cache, sqn = ix[0], ix[1], ix[2]
    n, d = vecs.shape
    LK = cache.shape[1]
    for i in range(n):
        for t in range(LK):
            cache[i, t] = 0.0
        acc = 0.0
        for c in range(d):
            v = np.float64(vecs[i, c])
            acc += v * v
            for t in range(LK):
                cache[i, t] += pt[c, t] * v
        sqn[i] = acc


@njit(cache=True, nogil=True)
def _cache_one(ix, i, v):
    pt, cache, sqn = ix[0], ix[1], ix[2]
    LK = cache.shape[1]
    for t in range(LK):
        cache[i, t] = 0.0
    acc = 0.0
    for c in range(v.shape[0]):
        x = v[c]
        acc += x * x
        for t in range(LK):
            cache[i, t] += pt[c, t] * x
    sqn[i] = acc


@njit(cache=True, nogil=True)
def _cache_rows_wb(ix, W, b):
    """Same as ``_cache_rows`` for the vectors ``[W[i], b[i]]``."""
    pt, cache, sqn = ix[0], ix[1], ix[2]
    n, d_in = W.shape
    LK = cache.shape[1]
    for i in range(n):
        for t in range(LK):
            cache[i, t] = 0.0
        acc = 0.0
        for c in range(d_in):
            v = np.float64(W[i, c])
            acc += v * v
            for t in range(LK):
                cache[i, t] += pt[c, t] * v
        v = np.float64(b[i])
        acc += v * v
        for t in range(LK):
            cache[i, t] += pt[d_in, t] * v
        sqn[i] = acc


@njit(cache=True, nogil=True)
def _build_tables(ix):
    L = ix[15][_I_L]
    n = ix[1].shape[0]
    _clear_tables(ix)
    for j in range(L):
        for i in range(n):
            _table_insert(ix, j, i, _data_bits(ix, i, j))


@njit(cache=True, nogil=True)
def _rehash_rows(ix, rows, nrows):
    """Move each listed neuron to its current fingerprint in every table,
    holding that table's mutex.  Returns the number of bucket moves."""
    fp, locks, L = ix[3], ix[13], ix[15][_I_L]
    base = locks.ctypes.data
    moved = 0
    for j in range(L):
        mutex_lock(base + j * MUTEX_BYTES)
        for u in range(nrows):
            i = rows[u]
            f = _data_bits(ix, i, j)
            if f != fp[j, i]:
                _table_remove(ix, j, i)
                _table_insert(ix, j, i, f)
                moved += 1
        mutex_unlock(base + j * MUTEX_BYTES)
    return moved


@njit(cache=True, nogil=True)
def _check_tables(ix):
    """Return 0 if every neuron sits in exactly one consistent bucket per table."""
    fp, slot_of, pos, members, counts, slot_key = ix[3], ix[4], ix[5], ix[6], ix[7], ix[8]
    mkeys, mvals = ix[11], ix[12]
    L, n = fp.shape
    for j in range(L):
        total = 0
        seen = np.zeros(n, np.int32)
        for h in range(mkeys.shape[1]):
            if mkeys[j, h] == _EMPTY:
                continue
            s = mvals[j, h]
            if slot_key[j, s] != mkeys[j, h] or counts[j, s] <= 0:
                return 1
            for u in range(counts[j, s]):
                m = members[j, s, u]
                seen[m] += 1
                if pos[j, m] != u or slot_of[j, m] != s or fp[j, m] != mkeys[j, h]:
                    return 2
            total += counts[j, s]
        if total != n:
            return 3
        for i in range(n):
            if seen[i] != 1:
                return 4
            if _map_find(mkeys[j], fp[j, i]) < 0:
                return 5
    return 0


@njit(cache=True, nogil=True)
def _seed(seed):
    np.random.seed(seed)


@njit(cache=True, nogil=True)
def _query_dots(pt, q_ids, q_vals, nq, dots):
    LK = dots.shape[0]
    for t in range(LK):
        dots[t] = 0.0
    for s in range(nq):
        c = q_ids[s]
        v = q_vals[s]
        for t in range(LK):
            dots[t] += pt[c, t] * v


def new_query_scratch(n: int, K: int, L: int):
    """Scratch buffers for ``_collect``; one set per worker."""
    npairs = max(1, K * (K - 1) // 2)
    return (
        np.zeros(n, np.int32),              # hits
        np.zeros(n, np.int32),              # cand
        np.zeros(n, np.int32),              # perm
        np.zeros(n, np.float64),            # keyf
        np.zeros(K * L, np.float64),        # dots
        np.zeros(L, np.int64),              # base fingerprints
        np.zeros((L, K), np.int64),         # single-flip order
        np.zeros((L, npairs), np.int64),    # double-flip codes
        np.zeros(n, np.int32),              # out
    )


@njit(cache=True, nogil=True)
def _collect(ix, q_ids, q_vals, nq, probes, cap, qs):
    """Multi-probe query.  Writes sorted ids to ``qs[8][:count]`` and returns
    (count, fallback, buckets_visited)."""
    pt, members, counts, mkeys, mvals, iparams = ix[0], ix[6], ix[7], ix[11], ix[12], ix[15]
    hits, cand, perm, keyf, dots, base, order, pairs, out = qs
    K = iparams[_I_K]
    L = iparams[_I_L]
    bcap = iparams[_I_BUCKET_CAP]
    n = ix[1].shape[0]
    if cap > n:
        cap = n

    nonzero = False
    for s in range(nq):
        if q_vals[s] != 0.0:
            nonzero = True
            break

    nc = 0
    visited = 0
    if nonzero:
        _query_dots(pt, q_ids, q_vals, nq, dots)
        max_probes = 1 + K + (K * (K - 1)) // 2
        P = probes if probes < max_probes else max_probes
        n_double = P - 1 - K
        for j in range(L):
            f = 0
            for k in range(K):
                if dots[j * K + k] >= 0.0:
                    f |= 1 << k
            base[j] = f
            if P > 1:
                conf = np.abs(dots[j * K:(j + 1) * K])
                srt = np.argsort(conf)
                for k in range(K):
                    order[j, k] = srt[k]
            if n_double > 0:
                u = 0
                for a in range(K):
                    for b in range(a + 1, K):
                        pairs[j, u] = a * K + b
                        u += 1
                for u in range(n_double):
                    v = u + np.random.randint(0, K * (K - 1) // 2 - u)
                    tmp = pairs[j, u]
                    pairs[j, u] = pairs[j, v]
                    pairs[j, v] = tmp
        for r in range(P):
            for j in range(L):
                f = base[j]
                if 1 <= r <= K:
                    f ^= 1 << order[j, r - 1]
                elif r > K:
                    code = pairs[j, r - 1 - K]
                    f ^= (1 << (code // K)) | (1 << (code % K))
                visited += 1
                at = _map_find(mkeys[j], f)
                if at < 0:
                    continue
                s = mvals[j, at]
                c = counts[j, s]
                if c > n:
                    c = n
                if c <= bcap:
                    for u in range(c):
                        m = members[j, s, u]
                        if hits[m] == 0:
                            cand[nc] = m
                            nc += 1
                        hits[m] += 1
                else:
                    for u in range(c):
                        perm[u] = u
                    for u in range(bcap):
                        v = u + np.random.randint(0, c - u)
                        tmp = perm[u]
                        perm[u] = perm[v]
                        perm[v] = tmp
                        m = members[j, s, perm[u]]
                        if hits[m] == 0:
                            cand[nc] = m
                            nc += 1
                        hits[m] += 1
            if nc >= cap:
                break

    fallback = 0
    if nc == 0:
        fallback = 1
        for u in range(n):
            perm[u] = u
        for u in range(cap):
            v = u + np.random.randint(0, n - u)
            tmp = perm[u]
            perm[u] = perm[v]
            perm[v] = tmp
            out[u] = perm[u]
        count = cap
    elif nc <= cap:
        for u in range(nc):
            out[u] = cand[u]
        count = nc
    else:
        for u in range(nc):
            keyf[u] = -(hits[cand[u]] + np.random.random())
        rank = np.argsort(keyf[:nc])
        for u in range(cap):
            out[u] = cand[rank[u]]
        count = cap
    for u in range(nc):
        hits[cand[u]] = 0
    out[:count].sort()
    return count, fallback, visited


# ---------------------------------------------------------------------------


@dataclass
class QueryResult:
    ids: np.ndarray
    fallback: bool
    buckets_visited: int


class LayerIndex:
    """L hash tables over n indexed vectors of length ``family.dim - 2``.

    Build with :func:`build_index` or :meth:`LayerIndex.build`.
    """

    def __init__(self, family: HashFamily, n: int, max_norm: float,
                 bucket_cap: int = DEFAULT_BUCKET_CAP):
        if n < 1:
            raise EmptyIndexError("an index needs at least one neuron")
        if bucket_cap < 1:
            raise ValueError("bucket_cap must be >= 1")
        self.family = family
        K, L = family.K, family.L
        slots = min(1 << K, n)
        map_size = 1
        while map_size < 2 * slots:
            map_size <<= 1
        self._fparams = np.array([max_norm, max_norm, U_SCALE, 0.0])
        self._iparams = np.array([K, L, bucket_cap, family.dim - 2], dtype=np.int64)
        self._arrays = (
            family.projections_t,
            np.zeros((n, K * L)),                       # cache
            np.zeros(n),                                # sqn
            np.zeros((L, n), np.int64),                 # fp
            np.full((L, n), -1, np.int32),              # slot_of
            np.zeros((L, n), np.int32),                 # pos
            np.zeros((L, slots, n), np.int32),          # members
            np.zeros((L, slots), np.int32),             # counts
            np.zeros((L, slots), np.int64),             # slot_key
            np.zeros((L, slots), np.int32),             # free
            np.zeros(L, np.int32),                      # nfree
            np.full((L, map_size), _EMPTY, np.int64),   # mkeys
            np.zeros((L, map_size), np.int32),          # mvals
            new_mutexes(L),
            self._fparams,
            self._iparams,
        )
        _clear_tables(self._arrays)
        self._scratch = None
        self.last_rebuild_moved = 0

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, vectors, family: HashFamily, max_norm: float | None = None,
              bucket_cap: int = DEFAULT_BUCKET_CAP) -> "LayerIndex":
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise EmptyIndexError("build_index needs a non-empty (n, d) array of vectors")
        if vectors.shape[1] != family.dim - 2:
            raise IndexStructureError(
                f"vectors have dim {vectors.shape[1]}, family expects {family.dim - 2}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateVectorError("cannot index a zero-norm weight vector")
        if max_norm is None:
            max_norm = float(norms.max())
        index = cls(family, vectors.shape[0], max_norm, bucket_cap)
        index._fparams[_F_OBSERVED] = max(max_norm, float(norms.max()))
        _cache_rows(index._arrays, vectors)
        _build_tables(index._arrays)
        return index

    @classmethod
    def build_from_layer(cls, W, b, family: HashFamily, max_norm: float | None = None,
                         bucket_cap: int = DEFAULT_BUCKET_CAP) -> "LayerIndex":
        """Index the neurons of a layer, hashing ``[W[i], b[i]]``."""
        W = np.asarray(W)
        b = np.asarray(b)
        if W.shape[1] + 1 != family.dim - 2:
            raise IndexStructureError("family dim must equal fan-in + 3")
        norms = np.sqrt((W.astype(np.float64) ** 2).sum(axis=1) + b.astype(np.float64) ** 2)
        if max_norm is None:
            max_norm = float(norms.max())
        index = cls(family, W.shape[0], max_norm, bucket_cap)
        index._fparams[_F_OBSERVED] = max(max_norm, float(norms.max()))
        _cache_rows_wb(index._arrays, W, b)
        _build_tables(index._arrays)
        return index

    # -- properties ---------------------------------------------------------

    @property
    def n(self) -> int:
        return self._arrays[1].shape[0]

    @property
    def K(self) -> int:
        return self.family.K

    @property
    def L(self) -> int:
        return self.family.L

    @property
    def bucket_cap(self) -> int:
        return int(self._iparams[_I_BUCKET_CAP])

    @property
    def max_norm(self) -> float:
        return float(self._fparams[_F_MAX_NORM])

    @property
    def observed_max_norm(self) -> float:
        return float(self._fparams[_F_OBSERVED])

    @property
    def rebuild_pending(self) -> bool:
        return self.observed_max_norm > REBUILD_GROWTH * self.max_norm

    # -- queries ------------------------------------------------------------

    def _query_scratch(self):
        if self._scratch is None:
            self._scratch = new_query_scratch(self.n, self.K, self.L)
        return self._scratch

    def query(self, x, probes_per_table: int = DEFAULT_PROBES, cap: int | None = None,
              seed=None) -> QueryResult:
        """Active-set query for a raw (untransformed) vector ``x`` of length d.

        Not thread safe for concurrent calls on the same object; the training
        kernels use their own scratch buffers.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.family.dim - 2,):
            raise IndexStructureError(
                f"query has shape {x.shape}, index expects ({self.family.dim - 2},)")
        if probes_per_table < 1:
            raise ValueError("probes_per_table must be >= 1")
        cap = self.n if cap is None else cap
        if cap < 1:
            raise ValueError("cap must be >= 1")
        _seed(_seed_value(seed))
        ids = np.flatnonzero(x).astype(np.int64)
        qs = self._query_scratch()
        count, fallback, visited = _collect(self._arrays, ids, x[ids], len(ids),
                                            probes_per_table, cap, qs)
        return QueryResult(qs[8][:count].astype(np.int64), bool(fallback), int(visited))

    def fingerprints_of(self, i: int) -> list[int]:
        self._check_id(i)
        return [int(f) for f in self._arrays[3][:, i]]

    def tables(self) -> list[dict[int, list[int]]]:
        """Snapshot of every table as {fingerprint: sorted neuron ids}."""
        members, counts, mkeys, mvals = (self._arrays[6], self._arrays[7],
                                         self._arrays[11], self._arrays[12])
        out = []
        for j in range(self.L):
            table = {}
            for h in np.flatnonzero(mkeys[j] != _EMPTY):
                s = mvals[j, h]
                table[int(mkeys[j, h])] = sorted(int(m) for m in members[j, s, :counts[j, s]])
            out.append(dict(sorted(table.items())))
        return out

    def check(self) -> None:
        code = _check_tables(self._arrays)
        if code:
            raise IndexStructureError(f"index invariant violated (code {code})")

    # -- maintenance --------------------------------------------------------

    def _check_id(self, i):
        if not 0 <= i < self.n:
            raise IndexStructureError(f"neuron id {i} is not indexed (n={self.n})")

    def reinsert(self, i: int, new_vector) -> int:
        """Re-hash neuron ``i`` after its vector changed.  Returns bucket moves."""
        self._check_id(i)
        v = np.asarray(new_vector, dtype=np.float64)
        if v.shape != (self.family.dim - 2,):
            raise IndexStructureError("new vector has the wrong dimension")
        _cache_one(self._arrays, i, v)
        norm = math.sqrt(self._arrays[2][i])
        if norm > self._fparams[_F_OBSERVED]:
            self._fparams[_F_OBSERVED] = norm
        return int(_rehash_rows(self._arrays, np.array([i], np.int64), 1))

    def refresh(self, vectors=None, W=None, b=None) -> int:
        """Recompute cached projections exactly from the current vectors and
        move any neuron whose fingerprint no longer matches.

        Performs a full rebuild with a fresh ``max_norm`` when the observed
        norm has grown past the rebuild threshold.  Returns the number of
        neurons that had to move (0 if the index was already exact).
        """
        if vectors is not None:
            vectors = np.asarray(vectors, dtype=np.float64)
            _cache_rows(self._arrays, vectors)
        else:
            _cache_rows_wb(self._arrays, W, b)
        cur_max = float(np.sqrt(self._arrays[2].max()))
        self._fparams[_F_OBSERVED] = max(self._fparams[_F_OBSERVED], cur_max)
        if self.rebuild_pending:
            self._fparams[_F_MAX_NORM] = cur_max
            self._fparams[_F_OBSERVED] = cur_max
            _build_tables(self._arrays)
            self.last_rebuild_moved = -1
            return -1
        moved = int(_rehash_rows(self._arrays, np.arange(self.n, dtype=np.int64), self.n))
        self.last_rebuild_moved = moved
        return moved

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_LSHX_HEADER.pack(LSHX_MAGIC, LSHX_VERSION, self.K, self.L,
                                   self.family.dim, self.max_norm)]
        for table in self.tables():
            parts.append(struct.pack("<I", len(table)))
            for f, ids in table.items():
                parts.append(struct.pack("<II", f, len(ids)))
                parts.append(np.asarray(ids, dtype="<u4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, family: HashFamily,
                   bucket_cap: int = DEFAULT_BUCKET_CAP) -> "LayerIndex":
        """Load tables written by :meth:`to_bytes`.

        Cached projections are not serialized; call :meth:`refresh` with the
        weights before incremental training use.
        """
        mv = memoryview(buf)
        if len(mv) < _LSHX_HEADER.size:
            raise IndexStructureError("truncated LSHX header")
        magic, version, K, L, dim, max_norm = _LSHX_HEADER.unpack_from(mv, 0)
        if magic != LSHX_MAGIC:
            raise IndexStructureError(f"bad magic {magic!r}")
        if version != LSHX_VERSION:
            raise IndexStructureError(f"unsupported LSHX version {version}")
        if (K, L, dim) != (family.K, family.L, family.dim):
            raise IndexStructureError("serialized index does not match the hash family")
        off = _LSHX_HEADER.size
        tables = []
        try:
            for _ in range(L):
                (nb,) = struct.unpack_from("<I", mv, off)
                off += 4
                table = []
                for _ in range(nb):
                    f, cnt = struct.unpack_from("<II", mv, off)
                    off += 8
                    ids = np.frombuffer(mv, dtype="<u4", count=cnt, offset=off)
                    off += 4 * cnt
                    table.append((f, ids.astype(np.int64)))
                tables.append(table)
        except (struct.error, ValueError) as exc:
            raise IndexStructureError("truncated LSHX body") from exc
        if off != len(mv):
            raise IndexStructureError("trailing bytes after LSHX body")
        n = sum(len(ids) for _, ids in tables[0])
        index = cls(family, n, max_norm, bucket_cap)
        for j, table in enumerate(tables):
            seen = np.zeros(n, np.int64)
            for f, ids in table:
                if f >> K or (len(ids) and ids.max() >= n):
                    raise IndexStructureError("fingerprint or id out of range")
                for i in ids:
                    seen[i] += 1
                    _table_insert(index._arrays, j, int(i), int(f))
            if not np.all(seen == 1):
                raise IndexStructureError(f"table {j} does not hold every neuron exactly once")
        return index

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, family: HashFamily, bucket_cap: int = DEFAULT_BUCKET_CAP) -> "LayerIndex":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), family, bucket_cap)


def _seed_value(seed) -> int:
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(0, 2**31 - 1))
    if seed is None:
        return int(np.random.default_rng().integers(0, 2**31 - 1))
    return int(seed) % (2**31 - 1)


def build_index(vectors, family: HashFamily, max_norm: float | None = None,
                bucket_cap: int = DEFAULT_BUCKET_CAP) -> LayerIndex:
    return LayerIndex.build(vectors, family, max_norm, bucket_cap)


def query_active_set(index: LayerIndex, x, probes_per_table: int = DEFAULT_PROBES,
                     cap: int | None = None, seed=None) -> QueryResult:
    return index.query(x, probes_per_table, cap, seed)


def reinsert(index: LayerIndex, i: int, new_vector) -> LayerIndex:
    index.reinsert(i, new_vector)
    return index
