import csv
import ctypes
import ctypes.util
import json
import math
import threading
import time

import numpy as np
import pytest

from hashprop import _sync
from hashprop.data import Dataset, gen_rectangles, split_shards
from hashprop.lsh_index import LayerIndex
from hashprop.network import (IDENTITY, ActiveSet, Layer, Network, backward_sparse,
                              forward_trace, output_loss_grad)
from hashprop.optimizer import NetworkOptimizer
from hashprop.samplers import AD, LSH, STD, VD, WTA, SamplerConfig
from hashprop.trainer import (CSV_FIELDS, ConfigError, DivergenceError, TrainConfig, Trainer,
                              _seed32, conflict_rate, evaluate, throughput_benchmark,
                              train_async, train_step, worker_ladder, write_manifest)


def random_data(n, d, classes, seed=0, zeros=0.3):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d)) * (rng.random((n, d)) > zeros)
    return Dataset(X, rng.integers(0, classes, n), classes, "random")


def weights(net):
    return [(l.W.copy(), l.b.copy()) for l in net.layers]


# -- single steps -------------------------------------------------------------

def test_standard_sgd_bit_identical_to_dense_reference():
    data = random_data(100, 20, 3, seed=1)
    net = Network.create(20, [16, 16], 3, seed=4)
    ref = net.copy()
    eta = 0.05
    trainer = Trainer(net, [SamplerConfig(STD)] * 2, NetworkOptimizer("sgd", eta).attach(net))
    for i in range(100):
        x, label = data.X[i], int(data.y[i])
        trainer.step(x, label, seed=i)
        sets = [ActiveSet(np.arange(h.n_out)) for h in ref.hidden]
        tr = forward_trace(ref, x, sets)
        grads = backward_sparse(ref, tr, output_loss_grad(tr.logits, label)[1])
        for layer, g in zip(ref.layers, grads):
            gW, gb = g.dense(layer.W.shape)
            layer.W[:] = (layer.W.astype(np.float64) - eta * gW).astype(np.float32)
            layer.b[:] = (layer.b.astype(np.float64) - eta * gb).astype(np.float32)
        for a, b in zip(net.layers, ref.layers):
            assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b), f"step {i}"


def test_standard_sgd_close_to_numpy_backprop():
    data = random_data(100, 20, 3, seed=2)
    net = Network.create(20, [16], 3, seed=5)
    W = [l.W.astype(np.float64) for l in net.layers]
    b = [l.b.astype(np.float64) for l in net.layers]
    opt = NetworkOptimizer("sgd", 0.05).attach(net)
    for i in range(100):
        x, y = data.X[i].astype(np.float64), int(data.y[i])
        train_step(net, (data.X[i], y), SamplerConfig(STD), opt, seed=i)
        z = W[0] @ x + b[0]
        h = np.maximum(z, 0)
        o = W[1] @ h + b[1]
        p = np.exp(o - o.max())
        p /= p.sum()
        p[y] -= 1
        dh = (W[1].T @ p) * (z > 0)
        W[1] -= 0.05 * np.outer(p, h)
        b[1] -= 0.05 * p
        W[0] -= 0.05 * np.outer(dh, x)
        b[0] -= 0.05 * dh
    for l, w, bb in zip(net.layers, W, b):
        assert np.allclose(l.W, w, atol=1e-5) and np.allclose(l.b, bb, atol=1e-5)


def test_worked_two_by_two_step():
    net = Network([Layer(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2)),
                   Layer(np.array([[1.0, -1.0], [0.0, 1.0]]), np.zeros(2), IDENTITY)])
    opt = NetworkOptimizer("sgd", 0.1).attach(net)
    # WTA at 50% of two units keeps unit 1 (activation 7 beats 3)
    res = train_step(net, (np.array([1.0, 1.0]), 0), SamplerConfig(WTA, k_frac=0.5), opt)
    assert list(res.active_sets[0].ids) == [1]
    # hidden (0, 7); logits (-7, 7); p1 = P(class 1)
    p1 = 1.0 / (1.0 + math.exp(-14.0))
    assert res.loss == pytest.approx(-math.log(1.0 - p1), rel=1e-9)
    W1, b1 = net.layers[0].W, net.layers[0].b
    W2, b2 = net.layers[1].W, net.layers[1].b
    assert np.allclose(W2, [[1.0, -1.0 + 0.7 * p1], [0.0, 1.0 - 0.7 * p1]], atol=1e-6)
    assert np.allclose(b2, [0.1 * p1, -0.1 * p1], atol=1e-6)
    assert np.allclose(W1, [[1.0, 2.0], [3.0 - 0.2 * p1, 4.0 - 0.2 * p1]], atol=1e-6)
    assert np.allclose(b1, [0.0, -0.2 * p1], atol=1e-6)


def test_lsh_step_touches_at_most_cap_rows():
    data = random_data(30, 64, 4, seed=3)
    net = Network.create(64, [1000, 1000], 4, seed=6)
    trainer = Trainer(net, [SamplerConfig(LSH, k_frac=0.05)] * 2,
                      NetworkOptimizer("adagrad", 1e-2).attach(net))
    for i in range(30):
        before = weights(net)
        res = trainer.step(data.X[i], int(data.y[i]), seed=i)
        for l in range(2):
            W0, b0 = before[l]
            changed = np.flatnonzero(np.any(net.layers[l].W != W0, axis=1)
                                     | (net.layers[l].b != b0))
            assert changed.size <= 50
            assert np.isin(changed, res.active_sets[l].ids).all()
        for ix in net.indices:
            ix.check()


def test_mults_match_network_counter_and_dense_for_ad_wta():
    data = random_data(1, 30, 3, seed=4, zeros=0.5)
    x, y = data.X[0], int(data.y[0])
    base = Network.create(30, [40], 3, seed=7)
    counts = {}
    for variant in (STD, AD, WTA, VD, LSH):
        net = base.copy()
        t = Trainer(net, [SamplerConfig(variant, k_frac=0.1, keep_prob=0.5)],
                    NetworkOptimizer("sgd", 0.01).attach(net))
        out = t.run_shard(data, np.zeros(1, np.int64), 1)
        counts[variant] = int(out["stats"][2])
    tr = forward_trace(base, x, [ActiveSet(np.arange(40))])
    assert counts[STD] == tr.mults == 40 * 30
    assert counts[AD] == counts[WTA] == counts[STD]
    assert counts[VD] < counts[STD] and counts[LSH] <= 4 * 30


def test_step_rejects_bad_example():
    net = Network.create(5, [6], 2)
    opt = NetworkOptimizer().attach(net)
    with pytest.raises(Exception):
        train_step(net, (np.zeros(4), 0), SamplerConfig(STD), opt)
    with pytest.raises(Exception):
        train_step(net, (np.zeros(5), 2), SamplerConfig(STD), opt)


# -- determinism and index maintenance ----------------------------------------

def test_single_worker_runs_are_reproducible_and_sequential():
    data = gen_rectangles(300, seed=2)
    cfg = TrainConfig(sampler=SamplerConfig(LSH, k_frac=0.05), epochs=2, seed=11)
    a = Network.create(784, [200, 200], 2, seed=1)
    b = a.copy()
    c = a.copy()
    train_async(a, data, cfg, evaluate_each_epoch=False)
    train_async(b, data, cfg, evaluate_each_epoch=False)
    assert a.to_bytes() == b.to_bytes()
    # the same epochs run by hand through one trainer
    t = Trainer(c, cfg.samplers_for(2), NetworkOptimizer(cfg.optimizer, cfg.lr).attach(c),
                cfg.batch, cfg.rehash_every, cfg.seed)
    from hashprop.trainer import refresh_indices
    for epoch in (1, 2):
        order = split_shards(len(data), 1, _seed32(cfg.seed, epoch))[0]
        t.run_shard(data, order, _seed32(cfg.seed, epoch, 0, 7))
        refresh_indices(c, t)
    assert a.to_bytes() == c.to_bytes()


def same_tables(ix, ref):
    norm = lambda x: [{k: sorted(v) for k, v in t.items()} for t in x.tables()]
    return norm(ix) == norm(ref)


@pytest.mark.parametrize("workers", [1, 4])
def test_rehash_soundness(workers):
    data = gen_rectangles(600, seed=3)
    net = Network.create(784, [300, 300], 2, seed=2)
    cfg = TrainConfig(sampler=SamplerConfig(LSH, k_frac=0.05), epochs=2, workers=workers,
                      oversubscribe=True, seed=5)
    hist = train_async(net, data, cfg, evaluate_each_epoch=False)
    assert all(m.repairs >= 0 for m in hist)
    for l, ix in enumerate(net.indices):
        ix.check()
        layer = net.layers[l]
        ref = LayerIndex.build_from_layer(layer.W, layer.b, ix.family, max_norm=ix.max_norm)
        assert same_tables(ix, ref)


def test_incremental_maintenance_before_epoch_barrier():
    """With one worker and per-step rehash the tables already match a rebuild
    from the current weights, before any reconciliation."""
    data = gen_rectangles(400, seed=4)
    net = Network.create(784, [300, 300], 2, seed=3)
    t = Trainer(net, [SamplerConfig(LSH, k_frac=0.05)] * 2, NetworkOptimizer().attach(net))
    t.run_shard(data, np.arange(400), 9)
    for l, ix in enumerate(net.indices):
        layer = net.layers[l]
        ref = LayerIndex.build_from_layer(layer.W, layer.b, ix.family, max_norm=ix.max_norm)
        assert same_tables(ix, ref)


# -- concurrency --------------------------------------------------------------

def test_conflict_rate_below_birthday_bound():
    data = gen_rectangles(2000, seed=1)
    net = Network.create(784, [1000, 1000], 2, seed=0)
    workers = 8
    cfg = TrainConfig(sampler=SamplerConfig(LSH, k_frac=0.05), workers=workers, epochs=1,
                      oversubscribe=True, seed=3)
    m = train_async(net, data, cfg, evaluate_each_epoch=False)[0]
    bound = 1 - (1 - 50 / 1000) ** (workers - 1) + 0.05
    print(f"conflict rate {m.conflict_rate:.4f}, bound {bound:.4f}")
    assert 0.0 < m.conflict_rate < bound


def test_conflict_rate_helper():
    a = (np.array([[1, 2, 3, 0], [5, 6, 0, 0]]), np.array([3, 2]))
    b = (np.array([[3, 9, 0, 0], [7, 0, 0, 0]]), np.array([2, 1]))
    # window 0: 1/3 of a and 1/2 of b shared; window 1: nothing shared
    assert conflict_rate([a, b]) == pytest.approx((1 / 3 + 1 / 2 + 0 + 0) / 4)
    assert conflict_rate([a]) == 0.0


def test_held_table_lock_does_not_block_parameter_updates():
    data = gen_rectangles(50, seed=5)
    net = Network.create(784, [200], 2, seed=4)
    t = Trainer(net, [SamplerConfig(LSH, k_frac=0.05)], NetworkOptimizer().attach(net))
    locks = net.indices[0]._arrays[13]
    held, release = threading.Event(), threading.Event()

    libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
    lock, unlock = libc.pthread_mutex_lock, libc.pthread_mutex_unlock
    lock.argtypes = unlock.argtypes = [ctypes.c_void_p]
    addrs = [locks.ctypes.data + j * _sync.MUTEX_BYTES for j in range(locks.shape[0])]

    def holder():
        # a stalled worker inside its bucket update
        for a in addrs:
            lock(a)
        held.set()
        release.wait(30)
        for a in addrs:
            unlock(a)

    h = threading.Thread(target=holder)
    h.start()
    held.wait(10)
    W0 = net.layers[0].W.copy()
    out0 = net.layers[1].W.copy()
    w = threading.Thread(target=t.run_shard, args=(data, np.arange(50), 1))
    w.start()
    deadline = time.time() + 20
    moved = False
    while time.time() < deadline:
        if np.any(net.layers[0].W != W0) and np.any(net.layers[1].W != out0):
            moved = True
            break
        time.sleep(0.01)
    still_waiting = w.is_alive()
    release.set()
    h.join()
    w.join(60)
    assert moved, "parameters did not change while a table lock was held"
    assert still_waiting
    assert not w.is_alive()


def test_too_many_workers_is_a_config_error():
    import os
    with pytest.raises(ConfigError):
        TrainConfig(workers=(os.cpu_count() or 1) + 1)
    TrainConfig(workers=(os.cpu_count() or 1) + 1, oversubscribe=True)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="adam")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# -- divergence ---------------------------------------------------------------

def test_nan_weight_aborts():
    net = Network.create(5, [6], 2)
    net.layers[0].W[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train_step(net, (np.ones(5), 0), SamplerConfig(STD), NetworkOptimizer().attach(net))
    data = random_data(20, 5, 2)
    with pytest.raises(DivergenceError) as err:
        train_async(net, data, TrainConfig(sampler=SamplerConfig(STD)))
    assert err.value.metrics == []


def test_accuracy_guard_aborts_after_five_epochs():
    train = random_data(200, 10, 2, seed=1)
    rng = np.random.default_rng(9)
    # labels of the test set are the opposite of a fixed rule the net can learn
    X = rng.random((200, 10))
    rule = (X[:, 0] > 0.5).astype(int)
    train = Dataset(X, rule, 2)
    test = Dataset(X, 1 - rule, 2)
    net = Network.create(10, [32], 2, seed=1)
    cfg = TrainConfig(sampler=SamplerConfig(STD), epochs=8, batch_size=1, lr=0.05)
    with pytest.raises(DivergenceError) as err:
        train_async(net, train, cfg, test)
    assert [m.epoch for m in err.value.metrics] == [1, 2, 3, 4, 5]
    assert "random guessing" in err.value.reason


# -- evaluation ---------------------------------------------------------------

def test_memorize_ten_examples():
    data = random_data(10, 20, 10, seed=6, zeros=0.0)
    data = Dataset(data.X, np.arange(10), 10)
    net = Network.create(20, [64], 10, seed=2)
    cfg = TrainConfig(sampler=SamplerConfig(STD), epochs=150, batch_size=1, lr=0.05,
                      divergence_epochs=10**6)
    train_async(net, data, cfg, evaluate_each_epoch=False)
    assert evaluate(net, data, "dense") == 1.0


def test_sparse_full_fraction_equals_dense():
    net = Network.create(30, [64, 64], 5, seed=8)
    X = np.random.default_rng(1).random((200, 30))
    labels = net.predict_dense(X).argmax(axis=1)
    data = Dataset(X, labels, 5)
    cfg = SamplerConfig(LSH, k_frac=1.0, K=2, L=1, probes=4)
    acc, details = evaluate(net, data, "sparse", cfg, return_details=True)
    assert evaluate(net, data, "dense") == 1.0
    assert acc == 1.0 and details["fallbacks"] == 0


def test_wta_and_ad_evaluation_modes():
    net = Network.create(30, [64], 5, seed=9)
    X = np.random.default_rng(2).random((100, 30))
    data = Dataset(X, net.predict_dense(X).argmax(axis=1), 5)
    assert evaluate(net, data, "wta", SamplerConfig(WTA, k_frac=1.0)) == 1.0
    assert evaluate(net, data, "ad", SamplerConfig(AD, beta=50.0)) == 1.0
    acc = evaluate(net, data, "sparse", SamplerConfig(LSH, k_frac=0.05))
    assert 0.0 <= acc <= 1.0
    with pytest.raises(ConfigError):
        evaluate(net, data, "bogus")


def test_eval_mode_follows_sampler():
    assert TrainConfig(sampler=SamplerConfig(LSH)).resolved_eval_mode() == "sparse"
    assert TrainConfig(sampler=SamplerConfig(WTA)).resolved_eval_mode() == "wta"
    assert TrainConfig(sampler=SamplerConfig(VD)).resolved_eval_mode() == "dense"
    assert TrainConfig(sampler=SamplerConfig(STD)).batch == 32
    assert TrainConfig(sampler=SamplerConfig(LSH)).batch == 1


# -- benchmark and run records ------------------------------------------------

def test_worker_ladder():
    assert worker_ladder(1) == [1]
    assert worker_ladder(8) == [1, 2, 4, 8]
    assert worker_ladder(6) == [1, 2, 4, 6]


def test_benchmark_single_worker_speedup_is_one():
    data = gen_rectangles(200, seed=7)
    net = Network.create(784, [100], 2, seed=5)
    rows = throughput_benchmark(net, data, [1, 2], TrainConfig(sampler=SamplerConfig(LSH)))
    assert rows[0]["workers"] == 1 and rows[0]["speedup"] == 1.0
    assert rows[1]["secs_per_epoch"] > 0
    # the benchmark trains copies, not the network passed in
    assert net.to_bytes() == Network.create(784, [100], 2, seed=5).to_bytes()


def test_csv_and_manifest(tmp_path):
    data = gen_rectangles(200, seed=8)
    test = gen_rectangles(100, seed=9)
    net = Network.create(784, [100], 2, seed=6)
    cfg = TrainConfig(sampler=SamplerConfig(LSH, k_frac=0.05), epochs=2, seed=3)
    path = tmp_path / "m.csv"
    hist = train_async(net, data, cfg, test, csv_path=path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == CSV_FIELDS
    assert len(rows) == 2
    for row, m in zip(rows, hist):
        assert int(row["epoch"]) == m.epoch and row["sampler"] == "lsh"
        for k in ("train_loss", "test_acc", "secs", "active_frac", "conflict_rate"):
            assert math.isfinite(float(row[k]))
        assert 0 < float(row["active_frac"]) <= 0.05 + 1e-9
        assert int(row["mults"]) > 0 and int(row["dense_mults"]) >= int(row["mults"])
    man = write_manifest(tmp_path / "run.json", cfg, data, {"metrics": "m.csv"}, 1.0, 2.0)
    loaded = json.loads((tmp_path / "run.json").read_text())
    assert loaded == man
    assert loaded["seed"] == 3 and loaded["config"]["batch_size"] == 1
    assert loaded["dataset"]["sha256"] == data.fingerprint()
