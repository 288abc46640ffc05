"""Compiled kernels vs the numpy fallback on mixup-sized problems.

    python benchmarks/bench_core.py [--reps 5] [--rank 200] [--pairs 500] [--grid 11]

Prints the best-of-reps wall time per kernel and backend, plus the
maximum absolute difference between the two results.
"""

import argparse
import time

import numpy as np

from sipwarp import _fallback

try:
    from sipwarp import _core
except ImportError:
    _core = None


def best_of(fn, reps):
    best = np.inf
    out = None
    for _ in range(reps):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def problem(rank, pairs, grid, m, batch, seed=0):
    rng = np.random.default_rng(seed)
    K = pairs * grid
    P = rng.standard_normal((K, rank))
    Q = rng.standard_normal((K, rank))
    c1 = rng.integers(0, m, K).astype(np.int64)
    c2 = rng.integers(0, m, K).astype(np.int64)
    Vt = rng.standard_normal((batch, m, rank))
    C = rng.standard_normal((batch, K))
    C[rng.random(C.shape) < 0.9] = 0.0  # coefficients from group maxima are sparse
    ptr = np.arange(0, K + 1, grid, dtype=np.int64)
    return P, Q, c1, c2, Vt, C, ptr


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--rank", type=int, default=200)
    ap.add_argument("--pairs", type=int, default=500)
    ap.add_argument("--grid", type=int, default=11)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--batch", type=int, default=200)
    a = ap.parse_args()
    P, Q, c1, c2, Vt, C, ptr = problem(a.rank, a.pairs, a.grid, a.classes, a.batch)
    proj = np.ascontiguousarray(_fallback.two_column_project(Vt, P, Q, c1, c2))

    cases = {
        "two_column_project": lambda mod: mod.two_column_project(Vt, P, Q, c1, c2),
        "two_column_adjoint": lambda mod: mod.two_column_adjoint(C, P, Q, c1, c2, a.classes),
        "grouped_max_sq": lambda mod: mod.grouped_max_sq(proj, ptr, False)[0],
        "grouped_max_sq(hinge)": lambda mod: mod.grouped_max_sq(proj, ptr, True)[0],
    }
    print(f"K={len(P)} elements, r={a.rank}, m={a.classes}, batch={a.batch}, best of {a.reps}")
    print(f"{'kernel':<24}{'numpy [s]':>12}{'cython [s]':>12}{'speedup':>10}{'max |diff|':>13}")
    for name, fn in cases.items():
        t_py, r_py = best_of(lambda: fn(_fallback), a.reps)
        if _core is None:
            print(f"{name:<24}{t_py:>12.4f}{'n/a':>12}")
            continue
        t_cy, r_cy = best_of(lambda: fn(_core), a.reps)
        diff = float(np.max(np.abs(np.asarray(r_py) - np.asarray(r_cy))))
        print(f"{name:<24}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>10.2f}{diff:>13.2e}")


if __name__ == "__main__":
    main()
