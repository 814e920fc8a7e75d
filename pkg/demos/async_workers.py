"""Lock-free training with several worker threads.

Runs the same LSH configuration with 1, 2, 4, ... workers and prints the
time per epoch, the speedup, the fraction of touched rows shared between
workers and the final accuracy.  On a machine with fewer cores than
workers the threads are oversubscribed and no speedup is expected.

    python3 demos/async_workers.py --max-workers 4
"""
import argparse
import os
from dataclasses import replace

from hashprop.data import gen_rectangles
from hashprop.network import Network
from hashprop.samplers import LSH, SamplerConfig
from hashprop.trainer import TrainConfig, train_async, worker_ladder


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--max-workers", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--train-size", type=int, default=4000)
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args()
    train = gen_rectangles(args.train_size, seed=1)
    test = gen_rectangles(1000, seed=2)
    net = Network.create(train.feature_dim, [1000, 1000], train.n_classes, seed=0)
    cfg = TrainConfig(sampler=SamplerConfig.at_level(LSH, 0.05), epochs=args.epochs,
                      optimizer="adagrad", lr=1e-2, seed=0,
                      oversubscribe=args.max_workers > (os.cpu_count() or 1))
    print(f"cores: {os.cpu_count()}")
    print(f"{'workers':>7} {'s/epoch':>8} {'speedup':>7} {'conflict':>8} {'test_acc':>8}")
    base = None
    for P in worker_ladder(args.max_workers):
        hist = train_async(net.copy(), train, replace(cfg, workers=P), test)
        # the first epoch includes compilation and cache warm-up
        timed = hist[1:] or hist
        secs = sum(m.secs for m in timed) / len(timed)
        base = base or secs
        print(f"{P:7d} {secs:8.2f} {base / secs:7.2f} {hist[-1].conflict_rate:8.4f} "
              f"{hist[-1].test_acc:8.4f}")

if __name__ == "__main__":
    main()
