"""Retrieval of a high inner-product neuron by the hash tables.

Plants one neuron aligned with a query among random ones and compares how
often the first probe of each table finds it with 1-(1-p^K)^L.

    python3 demos/lsh_retrieval.py --trials 2000
"""
import argparse
import math

import numpy as np

from hashprop.lsh_index import (HashFamily, build_index, collision_probability,
                                data_transform, query_transform, retrieval_probability)


def planted(rng, n, d, cos):
    q = rng.normal(size=d)
    u = q / np.linalg.norm(q)
    V = rng.normal(scale=0.3, size=(n, d))
    r = rng.normal(size=d)
    r -= (r @ u) * u
    r /= np.linalg.norm(r)
    M = 1.0 + np.linalg.norm(V, axis=1).max()
    V[0] = M * (cos * u + math.sqrt(1 - cos * cos) * r)
    return V, q, M


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=2000)
    ap.add_argument("--neurons", type=int, default=200)
    ap.add_argument("--dim", type=int, default=32)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'cos':>5} {'p':>6} {'K':>3} {'L':>3} {'empirical':>10} {'formula':>8}")
    for cos in (0.6, 0.9, 1.0):
        V, q, M = planted(rng, args.neurons, args.dim, cos)
        p = collision_probability(data_transform(V[0], M), query_transform(q))
        for K, L in ((4, 3), (6, 5), (8, 10)):
            hits = 0
            for s in range(args.trials):
                ix = build_index(V, HashFamily(s, K, L, args.dim + 2))
                res = ix.query(q, 1, ix.n, seed=s)
                hits += (not res.fallback) and (0 in res.ids)
            print(f"{cos:5.2f} {p:6.3f} {K:3d} {L:3d} {hits / args.trials:10.4f} "
                  f"{retrieval_probability(p, K, L):8.4f}")

    # what a capped query returns compared with the true top inner products
    V, q, M = planted(rng, 1000, args.dim, 0.9)
    ix = build_index(V, HashFamily(1, 6, 5, args.dim + 2))
    res = ix.query(q, 10, 50, seed=0)
    top = set(np.argsort(-(V @ q))[:50].tolist())
    print(f"\ncapped query over 1000 neurons: {len(res.ids)} ids, planted neuron "
          f"{'found' if 0 in res.ids else 'missed'}, "
          f"{len(top & set(res.ids.tolist()))} of the top 50 inner products")


if __name__ == "__main__":
    main()
