#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python twins.

Both backends execute identical floating-point operation sequences, so
this measures speed only; a bitwise cross-check runs first.

    python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from seqlora._kernels import pyref

try:
    from seqlora._kernels import ckern
except ImportError:
    ckern = None


def bench(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(rng):
    cases = []
    for n in (8, 32, 64):
        a = rng.standard_normal(n * n)
        b = rng.standard_normal(n * n)
        out = np.empty(n * n)
        cases.append((f"mat_mul {n}x{n} @ {n}x{n}", "mat_mul", (n, n, n, a, b, out)))
    for n in (8, 32, 64):
        g = rng.standard_normal((n, n))
        s = np.ascontiguousarray((g + g.T) / 2).ravel()
        cases.append(
            (f"jacobi_eigh {n}x{n}", "jacobi_eigh",
             (n, s.copy(), np.empty(n), np.empty(n * n)))
        )
    for n in (16, 64):
        g = rng.standard_normal((n, n))
        spd = np.ascontiguousarray(g @ g.T + np.eye(n)).ravel()
        cases.append(
            (f"cholesky_factor {n}x{n}", "cholesky_factor",
             (n, spd, np.empty(n * n)))
        )
    for m, r in ((16, 4), (64, 8)):
        g = rng.standard_normal(m * r)
        cases.append(
            (f"qr_orthonormal {m}x{r}", "qr_orthonormal", (m, r, g, np.empty(m * r)))
        )
    for m, c in ((32, 32), (64, 16)):
        a = rng.standard_normal(m * c)
        cases.append(
            (f"power_iter {m}x{c}", "power_iter_sigma", (m, c, a, 100, 1e-12))
        )
    return cases


def crosscheck(rng):
    n = 10
    g = rng.standard_normal((n, n))
    s = np.ascontiguousarray((g + g.T) / 2).ravel()
    v1, w1, v2, w2 = np.empty(n), np.empty(n * n), np.empty(n), np.empty(n * n)
    pyref.jacobi_eigh(n, s.copy(), v1, w1)
    ckern.jacobi_eigh(n, s.copy(), v2, w2)
    assert v1.tobytes() == v2.tobytes() and w1.tobytes() == w2.tobytes(), (
        "backends disagree bitwise"
    )


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    if ckern is None:
        raise SystemExit("compiled kernels are not built; run pip install -e .")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0)))
    crosscheck(rng)
    print("bitwise cross-check: ok\n")
    print(f"{'kernel':<28} {'pure':>12} {'compiled':>12} {'speedup':>9}")
    for label, name, case_args in make_cases(rng):
        t_pure = bench(getattr(pyref, name), case_args, args.repeats)
        t_comp = bench(getattr(ckern, name), case_args, args.repeats)
        print(
            f"{label:<28} {t_pure * 1e6:>10.1f}us {t_comp * 1e6:>10.1f}us "
            f"{t_pure / t_comp:>8.1f}x"
        )


if __name__ == "__main__":
    main()
