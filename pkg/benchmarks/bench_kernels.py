"""Compare the compiled and pure-Python forward-backward kernels.

    python3 benchmarks/bench_kernels.py [--lengths 250,1000,2000] [--repeat 5]

Also times a full EM fit on each backend, since that is where the kernel
runs in a backtest (once per EM iteration per refit).
"""
import argparse
import time

import numpy as np

from mpcfolio import kernels, regime
from mpcfolio._kernels_py import forward_backward as py_fb

try:
    from mpcfolio._kernels import forward_backward as cy_fb
except ImportError:
    cy_fb = None


def _problem(rng, T, K=2):
    log_b = rng.normal(size=(T, K)) * 3.0
    trans = np.array([[0.97, 0.03], [0.08, 0.92]])
    init = np.array([0.5, 0.5])
    return np.ascontiguousarray(log_b), trans, init


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _fit_panel(rng, T):
    z = rng.standard_normal((T, 4)) * 0.01
    z[T // 3: T // 2] *= 3.0
    return z


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default="250,1000,2000")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"default backend: {kernels.BACKEND}")
    if cy_fb is None:
        print("compiled extension not built; only the Python kernel is timed")
    print(f"{'T':>6} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for T in (int(x) for x in args.lengths.split(",")):
        lb, A, p0 = _problem(rng, T)
        t_py = _best_of(lambda: py_fb(lb, A, p0), args.repeat)
        if cy_fb is None:
            print(f"{T:>6} {1e3 * t_py:>10.2f} {'-':>10} {'-':>8} {'-':>11}")
            continue
        t_cy = _best_of(lambda: cy_fb(lb, A, p0), args.repeat)
        a, b = py_fb(lb, A, p0), cy_fb(lb, A, p0)
        diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a[:3], b[:3]))
        diff = max(diff, abs(a[3] - b[3]))
        print(f"{T:>6} {1e3 * t_py:>10.2f} {1e3 * t_cy:>10.3f} {t_py / t_cy:>8.1f} {diff:>11.2e}")

    print("\nEM fit (2 driving columns), seconds")
    for T in (500, 2000):
        y = _fit_panel(rng, T)
        times = {}
        for name in ("python", "cython"):
            if name == "cython" and cy_fb is None:
                continue
            saved = kernels.forward_backward
            if name == "python":
                kernels.forward_backward = kernels.python_forward_backward
            try:
                times[name] = _best_of(lambda: regime.fit_em(y, [0, 1]), max(1, args.repeat // 2))
            finally:
                kernels.forward_backward = saved
        print(f"  T={T}: " + ", ".join(f"{k} {v:.3f}" for k, v in times.items()))


if __name__ == "__main__":
    main()
