"""Time the compiled and pure-Python shuffle backends on the same inputs.

    python benchmarks/bench_shuffle.py [--sizes 1000 10000 100000] [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from shufflefl.shuffle import BACKENDS, derive_seed, seeded_permutation


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    available = [name for name, impl in BACKENDS.items() if impl is not None]
    seed = derive_seed(bytes(32), 1, 0)
    print(f"{'m':>9}  " + "  ".join(f"{b + ' (ms)':>14}" for b in available) + "  speedup")
    for m in args.sizes:
        perms = {b: seeded_permutation(seed, m, backend=b) for b in available}
        ref = perms[available[0]]
        assert all(np.array_equal(ref, p) for p in perms.values()), "backends disagree"
        ms = {b: 1e3 * best_of(lambda b=b: seeded_permutation(seed, m, backend=b), args.repeat) for b in available}
        speedup = ms["python"] / ms["compiled"] if {"python", "compiled"} <= ms.keys() else float("nan")
        print(f"{m:>9}  " + "  ".join(f"{ms[b]:>14.2f}" for b in available) + f"  {speedup:>6.1f}x")


if __name__ == "__main__":
    main()
