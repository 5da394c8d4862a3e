"""Time the compiled kernels against the numpy fallback on identical inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--trees 20]

Prints one line per kernel with the best-of-repeat time for each backend,
the speedup, and whether both backends returned identical results.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from covsel import _kernels_py
from covsel.novelty import _initial_alpha, rbf_kernel

try:
    from covsel import _kernels
except ImportError:
    _kernels = None


def _smo_case(rng, n=1000, d=8, nu=0.2):
    X = rng.standard_normal((n, d))
    Q = rbf_kernel(X, X, 1.0 / d)
    upper = 1.0 / (nu * n)
    alpha = _initial_alpha(n, upper)
    return Q, alpha, upper


def bench_smo(mod, case):
    Q, alpha0, upper = case
    alpha = alpha0.copy()
    G = Q @ alpha
    mod.smo_loop(Q, alpha, G, upper, 1e-5, 1_000_000)
    return alpha


def _tree_cases(rng, k, n=600, d=300):
    cases = []
    for _ in range(k):
        Xt = rng.random((d, n))
        Xt[d // 2 :] = np.floor(Xt[d // 2 :] * 4)  # half the features take 4 values
        y = (rng.random(n) < 0.5).astype(np.int8)
        order = np.argsort(Xt, axis=1, kind="stable").astype(np.int32)
        cases.append((Xt, y, order))
    return cases


def bench_trees(mod, cases):
    return [mod.grow_tree(Xt, y, order, 4, 2) for Xt, y, order in cases]


def _filter_case(rng, n=4000, d=300, keep=1100):
    order = np.argsort(rng.random((d, n)), axis=1).astype(np.int32)
    pos = np.full(n, -1, dtype=np.int64)
    pos[rng.choice(n, keep, replace=False)] = np.arange(keep)
    return order, pos, keep


def bench_filter(mod, case):
    return mod.filter_order(*case)


def _apply_case(rng, trees, n=16000, d=300):
    X = rng.random((n, d))
    return X, trees


def bench_apply(mod, case):
    X, trees = case
    return [mod.apply_tree(X, f, t, l, r) for f, t, l, r, *_ in trees]


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--trees", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    rng = np.random.default_rng(args.seed)
    tree_cases = _tree_cases(rng, args.trees)
    fitted = bench_trees(_kernels, tree_cases)
    jobs = [
        ("smo_loop (n=1000)", bench_smo, _smo_case(rng)),
        (f"grow_tree x{args.trees} (600x300, depth 4)", bench_trees, tree_cases),
        ("filter_order (300x4000 -> 1100)", bench_filter, _filter_case(rng)),
        (f"apply_tree x{args.trees} (16000 rows)", bench_apply, _apply_case(rng, fitted)),
    ]
    print(f"{'kernel':40s} {'cython s':>10s} {'numpy s':>10s} {'speedup':>8s}  identical")
    for name, fn, case in jobs:
        times = {}
        out = {}
        for label, mod in (("cython", _kernels), ("numpy", _kernels_py)):
            out[label] = fn(mod, case)
            times[label] = min(timeit.repeat(lambda: fn(mod, case), number=1, repeat=args.repeat))
        same = _same(out["cython"], out["numpy"])
        print(f"{name:40s} {times['cython']:10.4f} {times['numpy']:10.4f} {times['numpy'] / times['cython']:8.1f}x  {same}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
