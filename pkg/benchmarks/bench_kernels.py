"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both backends are imported side by side, so the environment flag does not
matter here. The first numba call (compilation) is excluded.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from sanreid import kernels


def cases(rng):
    fmap = rng.normal(size=(32, 16, 16, 2048)).astype(np.float32)
    grad = rng.normal(size=(32, 8, 2048)).astype(np.float32)
    Q = rng.normal(size=(256, 6144)).astype(np.float32)
    G = rng.normal(size=(1024, 6144)).astype(np.float32)
    dist = rng.random((800, 2000))
    q_ids = rng.integers(0, 800, 800)
    g_ids = rng.integers(0, 800, 2000)
    return {
        "hap_forward 32x16x16x2048 q=8": lambda impl: kernels.hap_forward(fmap, 8, impl=impl),
        "hap_backward 32x8x2048 -> 16x16": lambda impl: kernels.hap_backward(grad, 16, impl=impl),
        "pairwise_distance 256x1024 d=6144": lambda impl: kernels.pairwise_distance(Q, G, impl=impl),
        "rank_queries 800x2000": lambda impl: kernels.rank_queries(dist, q_ids, g_ids, impl=impl),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json")
    args = p.parse_args(argv)

    impls = {"numpy": kernels.backend("numpy")}
    try:
        impls["numba"] = kernels.backend("numba")
    except RuntimeError as exc:
        print(f"numba unavailable: {exc}")

    results = []
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {"case": name}
        for label, impl in impls.items():
            fn(impl)  # warm-up / compile
            row[label] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        if "numba" in row:
            row["speedup"] = row["numpy"] / row["numba"]
        results.append(row)

    print(f"{'case':<36}" + "".join(f"{k:>10}" for k in impls) + f"{'speedup':>10}")
    for row in results:
        times = "".join(f"{row[k] * 1e3:>8.1f}ms" for k in impls)
        speed = f"{row['speedup']:>9.1f}x" if "speedup" in row else ""
        print(f"{row['case']:<36}{times}{speed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return results


if __name__ == "__main__":
    main()
