"""Timing comparison of the compiled kernels against the pure-python fallback.

Run as a script:

    python3 benchmarks/bench_kernels.py [--repeats 7]

Times the two hot loops (the operator-splitting inner chunk and the
sequential projected-gradient scan) at several sizes and reports the best
wall time per call for each backend plus the agreement of their outputs.
"""

import argparse
import time

import numpy as np

from perfmdp._kernels import BACKEND, pure

try:
    from perfmdp._kernels import _fast
except ImportError:
    _fast = None


def _time_call(fn, args_factory, repeats):
    best = float("inf")
    for _ in range(repeats):
        args = args_factory()
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_admm(n, steps, repeats, rng):
    W = 0.5 * rng.standard_normal((n, n)) / np.sqrt(n)
    f0 = rng.standard_normal(n)
    z0 = np.abs(rng.standard_normal(n))
    u0 = 0.1 * rng.standard_normal(n)

    def args():
        return W, f0, z0.copy(), u0.copy(), steps

    t_pure = _time_call(pure.admm_chunk, args, repeats)
    if _fast is None:
        return t_pure, None, None
    t_fast = _time_call(_fast.admm_chunk, args, repeats)
    za, ua = z0.copy(), u0.copy()
    zb, ub = z0.copy(), u0.copy()
    da = pure.admm_chunk(W, f0, za, ua, steps)[0]
    db = _fast.admm_chunk(W, f0, zb, ub, steps)[0]
    diff = max(np.max(np.abs(da - db)), np.max(np.abs(za - zb)), np.max(np.abs(ua - ub)))
    return t_pure, t_fast, diff


def bench_scan(k, dim, repeats, rng):
    G = rng.standard_normal((k, dim))
    omega0 = 0.1 * rng.standard_normal(dim)

    def args():
        return omega0.copy(), G, 0.01, 1.0

    t_pure = _time_call(pure.projected_scan, args, repeats)
    if _fast is None:
        return t_pure, None, None
    t_fast = _time_call(_fast.projected_scan, args, repeats)
    aa, la = pure.projected_scan(omega0.copy(), G, 0.01, 1.0)
    ab, lb = _fast.projected_scan(omega0.copy(), G, 0.01, 1.0)
    diff = max(np.max(np.abs(aa - ab)), np.max(np.abs(la - lb)))
    return t_pure, t_fast, diff


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()
    rng = np.random.Generator(np.random.Philox(key=2024))

    print(f"active backend: {BACKEND}")
    if _fast is None:
        print("compiled kernels unavailable; timing the fallback only")
    print()
    header = f"{'kernel':<26}{'pure (ms)':>12}{'fast (ms)':>12}{'speedup':>9}{'max diff':>11}"
    print(header)
    print("-" * len(header))

    for n, steps in ((8, 50), (32, 50), (128, 50)):
        tp, tf, diff = bench_admm(n, steps, args.repeats, rng)
        label = f"admm_chunk n={n} x{steps}"
        if tf is None:
            print(f"{label:<26}{tp * 1e3:>12.4f}{'-':>12}{'-':>9}{'-':>11}")
        else:
            print(f"{label:<26}{tp * 1e3:>12.4f}{tf * 1e3:>12.4f}{tp / tf:>9.2f}{diff:>11.2e}")

    for k, dim in ((200, 4), (2000, 16), (20000, 16)):
        tp, tf, diff = bench_scan(k, dim, args.repeats, rng)
        label = f"projected_scan K={k} D={dim}"
        if tf is None:
            print(f"{label:<26}{tp * 1e3:>12.4f}{'-':>12}{'-':>9}{'-':>11}")
        else:
            print(f"{label:<26}{tp * 1e3:>12.4f}{tf * 1e3:>12.4f}{tp / tf:>9.2f}{diff:>11.2e}")


if __name__ == "__main__":
    main()
