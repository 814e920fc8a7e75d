import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from hashprop.lsh_index import (DEFAULT_BUCKET_CAP, U_SCALE, DegenerateVectorError,
                                EmptyIndexError, HashFamily, IndexStructureError,
                                LayerIndex, build_index, collision_probability,
                                data_transform, fingerprint, query_active_set,
                                query_transform, reinsert, retrieval_probability)


def snapshot(ix):
    return [{f: sorted(ids) for f, ids in t.items()} for t in ix.tables()]


# -- transforms --------------------------------------------------------------

def test_data_transform_at_max_norm():
    rng = np.random.default_rng(0)
    w = rng.normal(size=7)
    aug = data_transform(w, float(np.linalg.norm(w)))
    assert aug.shape == (9,)
    assert aug[-2] == pytest.approx(math.sqrt(1 - 0.83 ** 2), abs=1e-12)
    assert aug[-2] == pytest.approx(0.5578, abs=5e-5)
    assert aug[-1] == 0.0


def test_data_transform_basis_vector():
    M = 3.0
    aug = data_transform(M * np.eye(5)[0], M)
    assert aug[0] == pytest.approx(0.83)
    assert np.all(aug[1:5] == 0.0)
    assert aug[5] == pytest.approx(math.sqrt(1 - 0.6889))


def test_data_transform_unit_norm_identity():
    rng = np.random.default_rng(1)
    for _ in range(100):
        w = rng.normal(size=rng.integers(1, 40))
        aug = data_transform(w, float(np.linalg.norm(w)))
        assert np.linalg.norm(aug[:-1]) == pytest.approx(1.0, abs=1e-12)


def test_data_transform_rejects_zero():
    with pytest.raises(DegenerateVectorError):
        data_transform(np.zeros(4), 1.0)


def test_query_transform_examples():
    e1 = np.eye(4)[0]
    assert np.array_equal(query_transform(e1), [1, 0, 0, 0, 0, 0])
    x = np.random.default_rng(2).normal(size=10)
    a, b = query_transform(x), query_transform(5 * x)
    # equal up to the rounding of the two norms
    assert np.all(np.abs(a - b) <= 2 * np.spacing(np.abs(a)))
    fam = HashFamily(0, 6, 5, 12)
    assert [fingerprint(a, fam, j) for j in range(5)] == [fingerprint(b, fam, j) for j in range(5)]
    with pytest.raises(DegenerateVectorError):
        query_transform(np.zeros(3))


def test_query_transform_preserves_inner_product_order():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        d = 6
        x = rng.normal(size=d)
        w1, w2 = rng.normal(size=(2, d))
        w2 *= np.linalg.norm(w1) / np.linalg.norm(w2)
        M = 2 * np.linalg.norm(w1)
        q = query_transform(x)
        s1, s2 = q @ data_transform(w1, M), q @ data_transform(w2, M)
        if w1 @ x > w2 @ x:
            assert s1 > s2
        elif w1 @ x < w2 @ x:
            assert s1 < s2


# -- fingerprints and probabilities -------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(1e-3, 1e3))
def test_fingerprint_positive_scale_invariance(seed, c):
    fam = HashFamily(seed, 6, 3, 10)
    v = np.random.default_rng(seed).normal(size=10)
    for j in range(3):
        assert fingerprint(v, fam, j) == fingerprint(c * v, fam, j)


def test_fingerprint_single_projection():
    fam = SimpleNamespace(K=1, L=1, dim=3, projections=np.array([[[1.0, 0.0, 0.0]]]))
    assert fingerprint(np.array([2.0, 0, 0]), fam, 0) == 1
    assert fingerprint(np.array([-2.0, 0, 0]), fam, 0) == 0


def test_fingerprint_low_bits_only_and_errors():
    fam = HashFamily(5, 4, 2, 8)
    v = np.random.default_rng(0).normal(size=8)
    assert fingerprint(v, fam, 1) >> 4 == 0
    with pytest.raises(IndexStructureError):
        fingerprint(np.ones(7), fam, 0)
    with pytest.raises(IndexStructureError):
        fingerprint(v, fam, 2)


def test_family_determinism_and_shape():
    a, b = HashFamily(11, 6, 5, 20), HashFamily(11, 6, 5, 20)
    assert a.projections.shape == (5, 6, 20)
    assert np.array_equal(a.projections, b.projections)
    assert np.all(np.any(a.projections != 0, axis=2))
    with pytest.raises(ValueError):
        HashFamily(0, 33, 1, 5)


def test_collision_rate_matches_angle_formula():
    # 10^6 sign bits drawn from 1000 seeded families
    x = np.array([1.0, 0.0, 0.0])
    theta = 1.1
    y = np.array([math.cos(theta), math.sin(theta), 0.0])
    agree = 0
    total = 0
    for seed in range(1000):
        fam = HashFamily(seed, 32, 32, 3)
        P = fam.projections.reshape(-1, 3)
        agree += int(np.sum((P @ x >= 0) == (P @ y >= 0)))
        total += P.shape[0]
        if seed < 3:
            bits = [fingerprint(x, fam, j) == fingerprint(y, fam, j) for j in range(32)]
            per_table = np.all(((P @ x >= 0) == (P @ y >= 0)).reshape(32, 32), axis=1)
            assert bits == list(per_table)
    assert agree / total == pytest.approx(1 - theta / math.pi, abs=0.01)


def test_collision_probability_examples():
    assert collision_probability([1, 2], [1, 2]) == 1.0
    assert collision_probability([1, 0], [0, 3]) == pytest.approx(0.5)
    assert collision_probability([1, 0], [1, 1]) == pytest.approx(0.75)
    with pytest.raises(DegenerateVectorError):
        collision_probability([0, 0], [1, 1])


def test_retrieval_probability_examples():
    assert retrieval_probability(1.0, 6, 5) == 1.0
    assert retrieval_probability(0.0, 6, 5) == 0.0
    p = Fraction(4, 5)
    exact = 1 - (1 - p ** 6) ** 5
    assert retrieval_probability(0.8, 6, 5) == pytest.approx(float(exact), abs=1e-12)
    assert retrieval_probability(0.8, 6, 5) == pytest.approx(0.781295, abs=1e-6)
    assert retrieval_probability(0.8, 6, 5, r=0.5) == pytest.approx(
        float(1 - (1 - (p / 2) ** 6) ** 5), abs=1e-12)
    with pytest.raises(ValueError):
        retrieval_probability(1.5, 6, 5)
    with pytest.raises(ValueError):
        retrieval_probability(0.5, 6, 5, r=0.0)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 12), st.integers(1, 12))
def test_retrieval_probability_monotone(p1, p2, K, L):
    lo, hi = sorted((p1, p2))
    assert retrieval_probability(lo, K, L) <= retrieval_probability(hi, K, L)


# -- building -----------------------------------------------------------------

def test_singleton_index():
    fam = HashFamily(0, 6, 5, 6)
    ix = build_index(np.array([[0.3, -1.0, 2.0, 0.5]]), fam)
    tables = ix.tables()
    assert len(tables) == 5
    assert all(list(t.values()) == [[0]] for t in tables)


def test_identical_vectors_share_buckets():
    fam = HashFamily(1, 6, 5, 10)
    v = np.random.default_rng(0).normal(size=8)
    ix = build_index(np.stack([v, v, -v]), fam)
    for j in range(5):
        assert ix.fingerprints_of(0)[j] == ix.fingerprints_of(1)[j]


def test_occupied_buckets_bounded():
    fam = HashFamily(2, 6, 5, 34)
    ix = build_index(np.random.default_rng(1).normal(size=(1000, 32)), fam)
    occupied = [len(t) for t in ix.tables()]
    assert np.mean(occupied) <= 64
    assert all(sum(len(v) for v in t.values()) == 1000 for t in ix.tables())
    ix.check()


def test_build_errors():
    fam = HashFamily(0, 4, 2, 5)
    with pytest.raises(EmptyIndexError):
        build_index(np.zeros((0, 3)), fam)
    with pytest.raises(DegenerateVectorError):
        build_index(np.array([[1.0, 0, 0], [0, 0, 0]]), fam)
    with pytest.raises(IndexStructureError):
        build_index(np.ones((2, 4)), fam)


def test_build_from_layer_hashes_bias():
    rng = np.random.default_rng(4)
    W, b = rng.normal(size=(20, 5)).astype(np.float32), rng.normal(size=20).astype(np.float32)
    fam = HashFamily(3, 6, 4, 8)
    a = LayerIndex.build_from_layer(W, b, fam)
    c = build_index(np.column_stack([W, b]).astype(np.float64), fam)
    assert snapshot(a) == snapshot(c)


# -- queries ------------------------------------------------------------------

def test_empty_buckets_give_flagged_fallback():
    w = np.array([1.0, 2.0, -0.5, 0.3])
    fam = HashFamily(9, 6, 5, 6)
    ix = build_index(np.stack([w, w, w]), fam)
    neuron_fp = ix.fingerprints_of(0)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x = rng.normal(size=4)
        q = query_transform(x)
        if all(fingerprint(q, fam, j) != neuron_fp[j] for j in range(5)):
            break
    res = query_active_set(ix, x, probes_per_table=1, cap=2, seed=1)
    assert res.fallback
    assert len(res.ids) == 2 and len(set(res.ids)) == 2


def test_zero_query_falls_back():
    ix = build_index(np.random.default_rng(0).normal(size=(10, 4)), HashFamily(0, 3, 2, 6))
    res = ix.query(np.zeros(4), 3, 4, seed=0)
    assert res.fallback and len(res.ids) == 4


def test_cap_truncates_to_exactly_cap():
    v = np.array([0.5, -1.0, 2.0])
    ix = build_index(np.tile(v, (50, 1)), HashFamily(0, 2, 1, 5))
    res = ix.query(np.array([1.0, 1.0, 1.0]), probes_per_table=4, cap=10, seed=0)
    assert len(res.ids) == 10 and not res.fallback
    assert np.all(np.diff(res.ids) > 0)


def test_exhaustive_probing_returns_everything():
    rng = np.random.default_rng(5)
    ix = build_index(rng.normal(size=(30, 6)), HashFamily(1, 2, 2, 8))
    res = ix.query(rng.normal(size=6), probes_per_table=4, cap=30, seed=0)
    assert np.array_equal(res.ids, np.arange(30))


def test_probe_sequence_distinct_and_bounded():
    # K=3 allows 1 + 3 + 3 = 7 distinct probes; asking for more changes nothing
    rng = np.random.default_rng(6)
    ix = build_index(rng.normal(size=(40, 5)), HashFamily(2, 3, 2, 7))
    x = rng.normal(size=5)
    a = ix.query(x, probes_per_table=7, cap=40, seed=3)
    b = ix.query(x, probes_per_table=50, cap=40, seed=3)
    assert np.array_equal(a.ids, b.ids)
    assert a.buckets_visited == b.buckets_visited == 14


def test_buckets_visited_independent_of_n():
    for n in (100, 10000):
        rng = np.random.default_rng(n)
        ix = build_index(rng.normal(size=(n, 16)), HashFamily(0, 6, 5, 18))
        for _ in range(20):
            res = ix.query(rng.normal(size=16), probes_per_table=10, cap=n, seed=0)
            assert res.buckets_visited <= 5 * 10


def test_query_dimension_checked():
    ix = build_index(np.ones((3, 4)), HashFamily(0, 3, 2, 6))
    with pytest.raises(IndexStructureError):
        ix.query(np.ones(5))
    with pytest.raises(ValueError):
        ix.query(np.ones(4), probes_per_table=0)


def test_query_seed_determinism():
    rng = np.random.default_rng(7)
    ix = build_index(rng.normal(size=(500, 10)), HashFamily(4, 6, 5, 12))
    x = rng.normal(size=10)
    assert np.array_equal(ix.query(x, 10, 20, seed=42).ids, ix.query(x, 10, 20, seed=42).ids)


def test_oversized_buckets_are_subsampled():
    v = np.array([1.0, 0.5])
    ix = build_index(np.tile(v, (300, 1)), HashFamily(0, 1, 1, 4), bucket_cap=128)
    x = np.array([1.0, 0.5])
    # two probes cover both buckets of a 1-bit table
    res = ix.query(x, probes_per_table=2, cap=300, seed=0)
    assert not res.fallback and len(res.ids) == 128
    seen = set()
    for s in range(20):
        seen.update(ix.query(x, 2, 300, seed=s).ids.tolist())
    assert len(seen) > 128


def planted_trial_rates(x, w, K, L, trials, extra=None):
    """Fraction of seeded families whose base probes retrieve neuron 0."""
    d = x.size
    vecs = w[None, :] if extra is None else np.vstack([w, extra])
    hits = 0
    for seed in range(trials):
        fam = HashFamily(seed, K, L, d + 2)
        ix = LayerIndex.build(vecs, fam)
        res = ix.query(x, probes_per_table=1, cap=vecs.shape[0], seed=seed)
        hits += (not res.fallback) and 0 in res.ids
    return hits / trials


def test_parallel_neuron_retrieved_per_theorem():
    rng = np.random.default_rng(8)
    x = rng.normal(size=16)
    w = 2.0 * x
    p = collision_probability(query_transform(x), data_transform(w, np.linalg.norm(w)))
    rate = planted_trial_rates(x, w, 6, 5, 10_000)
    assert rate >= retrieval_probability(p, 6, 5) - 0.02


def test_retrieval_monotone_in_inner_product():
    rng = np.random.default_rng(9)
    d = 12
    x = rng.normal(size=d)
    x /= np.linalg.norm(x)
    u = rng.normal(size=d)
    u -= (u @ x) * x
    u /= np.linalg.norm(u)
    angles = np.linspace(0.15, 2.0, 20)
    W = np.array([math.cos(a) * x + math.sin(a) * u for a in angles])  # unit norm
    counts = np.zeros(20)
    trials = 10_000
    for seed in range(trials):
        ix = LayerIndex.build(W, HashFamily(seed, 6, 5, d + 2))
        res = ix.query(x, probes_per_table=1, cap=20, seed=seed)
        if not res.fallback:
            counts[res.ids] += 1
    rho = spearmanr(W @ x, counts).statistic
    assert rho >= 0.95
    assert np.all(np.diff(counts[::-1]) >= -0.02 * trials)


def test_recall_of_top_inner_products():
    """1000 Gaussian neurons, 128 dims: the size-50 active set should hold
    at least 30% of the exact top-50 inner products."""
    rng = np.random.default_rng(10)
    W = rng.normal(size=(1000, 128))
    ix = LayerIndex.build(W, HashFamily(0, 6, 5, 130))
    recalls = []
    for q in range(100):
        x = rng.normal(size=128)
        top = set(np.argsort(-(W @ x))[:50].tolist())
        got = ix.query(x, probes_per_table=10, cap=50, seed=q).ids
        recalls.append(len(top & set(got.tolist())) / 50)
    print(f"mean recall {np.mean(recalls):.3f}")
    assert np.mean(recalls) >= 0.30


# -- maintenance --------------------------------------------------------------

def test_reinsert_unchanged_is_identity():
    rng = np.random.default_rng(11)
    V = rng.normal(size=(50, 8))
    ix = build_index(V, HashFamily(0, 6, 5, 10), max_norm=10.0)
    before = snapshot(ix)
    for i in range(50):
        assert ix.reinsert(i, V[i]) == 0
    assert snapshot(ix) == before


def test_reinsert_removes_old_fingerprints():
    rng = np.random.default_rng(12)
    V = rng.normal(size=(50, 8))
    ix = build_index(V, HashFamily(1, 6, 5, 10), max_norm=10.0)
    old = ix.fingerprints_of(7)
    reinsert(ix, 7, -V[7])
    new = ix.fingerprints_of(7)
    for j, t in enumerate(ix.tables()):
        if old[j] != new[j]:
            assert 7 not in t.get(old[j], [])
        assert 7 in t[new[j]]
    ix.check()


def test_reinsert_then_self_query_finds_neuron():
    rng = np.random.default_rng(13)
    V = rng.normal(size=(30, 6))
    fam = HashFamily(2, 6, 5, 8)
    ix = build_index(V, fam, max_norm=5.0)
    w = rng.normal(size=6)
    ix.reinsert(3, w)
    q = query_transform(w / np.linalg.norm(w))
    aug = data_transform(w, 5.0)
    for j in range(5):
        if fingerprint(q, fam, j) == fingerprint(aug, fam, j):
            assert 3 in ix.tables()[j][fingerprint(q, fam, j)]


def test_reinsert_unknown_id():
    ix = build_index(np.ones((3, 2)), HashFamily(0, 2, 1, 4))
    with pytest.raises(IndexStructureError):
        ix.reinsert(3, np.ones(2))
    with pytest.raises(IndexStructureError):
        ix.reinsert(0, np.ones(3))


def test_many_reinserts_match_rebuild():
    rng = np.random.default_rng(14)
    n, d = 1000, 16
    V = rng.normal(size=(n, d))
    fam = HashFamily(5, 6, 5, d + 2)
    M = 3.0 * float(np.linalg.norm(V, axis=1).max())
    ix = build_index(V, fam, max_norm=M)
    ids = rng.integers(0, n, size=100_000)
    for step, i in enumerate(ids):
        V[i] += rng.normal(scale=0.3, size=d)
        ix.reinsert(int(i), V[i])
        if step % 20_000 == 0:
            ix.check()
    ix.check()
    assert not ix.rebuild_pending
    assert snapshot(ix) == snapshot(build_index(V, fam, max_norm=M))


def test_norm_growth_defers_full_rebuild():
    rng = np.random.default_rng(15)
    V = rng.normal(size=(40, 5))
    fam = HashFamily(6, 6, 5, 7)
    ix = build_index(V, fam)
    M = ix.max_norm
    V[0] *= 1.05 * M / np.linalg.norm(V[0])
    ix.reinsert(0, V[0])
    assert ix.observed_max_norm > M and not ix.rebuild_pending
    V[1] *= 1.5 * M / np.linalg.norm(V[1])
    ix.reinsert(1, V[1])
    assert ix.rebuild_pending
    ix.check()
    assert ix.refresh(vectors=V) == -1
    assert ix.max_norm == pytest.approx(np.linalg.norm(V, axis=1).max())
    assert not ix.rebuild_pending
    assert snapshot(ix) == snapshot(build_index(V, fam))


def test_refresh_repairs_drift():
    rng = np.random.default_rng(16)
    V = rng.normal(size=(200, 8))
    fam = HashFamily(7, 6, 5, 10)
    ix = build_index(V, fam, max_norm=20.0)
    V2 = V + rng.normal(scale=0.5, size=V.shape)
    moved = ix.refresh(vectors=V2)
    assert moved > 0
    assert ix.refresh(vectors=V2) == 0
    assert snapshot(ix) == snapshot(build_index(V2, fam, max_norm=20.0))


def test_default_bucket_cap():
    ix = build_index(np.ones((2, 2)), HashFamily(0, 2, 1, 4))
    assert ix.bucket_cap == DEFAULT_BUCKET_CAP == 128
    assert U_SCALE == 0.83
