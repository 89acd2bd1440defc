"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 200 500 1500] [--repeat 5]

Prints one line per (kernel, size) with the best-of-``repeat`` wall time of
each backend, their speed ratio and the max absolute difference of outputs.
"""

import argparse
import sys
import timeit

import numpy as np

from matdeform.kernels import BACKENDS


def _cases(n, rng):
    X = rng.normal(size=(n, 3))
    T = rng.normal(size=(n, 3))
    log_coef = rng.normal(scale=0.1, size=n)
    inv2var = np.full(n, 0.5)
    return {
        "gaussian_kernel": (T, 1.5),
        "estep": (X, T, log_coef, inv2var, np.log(0.01)),
        "mixture_density": (X, T, log_coef, inv2var),
    }


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[200, 500, 1500])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if "cython" not in BACKENDS:
        print("compiled extension not built; only the numpy fallback is available", file=sys.stderr)
        return 1
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'n':>6} {'python_s':>10} {'cython_s':>10} {'speedup':>8} {'max_diff':>10}")
    for n in args.sizes:
        for name, inputs in _cases(n, rng).items():
            f_py, f_cy = getattr(py, name), getattr(cy, name)
            t_py = min(timeit.repeat(lambda: f_py(*inputs), number=1, repeat=args.repeat))
            t_cy = min(timeit.repeat(lambda: f_cy(*inputs), number=1, repeat=args.repeat))
            diff = _maxdiff(f_py(*inputs), f_cy(*inputs))
            print(f"{name:<16} {n:>6} {t_py:>10.4f} {t_cy:>10.4f} {t_py / t_cy:>8.2f} {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
