"""Accuracy and hidden-layer cost of each sampler at a few active fractions.

Trains small networks on the rectangles task and prints test accuracy
next to the fraction of dense multiplications each run spent.

    python3 demos/sparsity_sweep.py --train-size 3000 --epochs 3
"""
import argparse

from hashprop.data import gen_rectangles
from hashprop.network import Network
from hashprop.samplers import AD, LSH, STD, VD, WTA, SamplerConfig
from hashprop.trainer import TrainConfig, train_async


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train-size", type=int, default=3000)
    ap.add_argument("--test-size", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--hidden", type=int, default=300)
    ap.add_argument("--levels", default="0.05,0.25")
    args = ap.parse_args()
    train = gen_rectangles(args.train_size, seed=1)
    test = gen_rectangles(args.test_size, seed=2)

    grid = [(STD, 1.0)]
    for level in (float(v) for v in args.levels.split(",")):
        grid += [(v, level) for v in (VD, WTA, LSH)]
        if level >= 0.25:  # adaptive dropout is unstable below a quarter active
            grid.append((AD, level))

    print(f"{'sampler':>7} {'level':>5} {'test_acc':>8} {'mults/dense':>11} {'secs':>6}")
    for variant, level in grid:
        net = Network.create(train.feature_dim, [args.hidden] * 2, train.n_classes, seed=0)
        cfg = TrainConfig(sampler=SamplerConfig.at_level(variant, level), epochs=args.epochs,
                          optimizer="adagrad", lr=1e-2, seed=0)
        hist = train_async(net, train, cfg, test)
        mults = sum(m.mults for m in hist) / sum(m.dense_mults for m in hist)
        secs = sum(m.secs for m in hist)
        print(f"{variant:>7} {level:5.2f} {hist[-1].test_acc:8.4f} {mults:11.4f} {secs:6.1f}")


if __name__ == "__main__":
    main()
