#!/usr/bin/env python3
"""Reproduce the pilot runs behind the constants pinned in
tests/test_acceptance.py (stationarity step size and target spectrum;
learned-vs-frozen residual-energy margin).

    python benchmarks/pilots.py [--seeds N]
"""

from __future__ import annotations

import argparse

import numpy as np

from seqlora import matrix as mx
from seqlora import optimizers as op
from seqlora import tasks as tk
from seqlora.matrix import Matrix
from seqlora.registry import basis_complement_projector
from seqlora.rng import make_rng


def stationarity_pilot(seeds: int) -> None:
    cfg = op.BilevelConfig(
        bilevel_iters=50, local_b_steps=4, local_a_steps=4,
        alpha_mode="fixed", alpha=0.08, beta_mode="fixed", beta=0.08,
        init_scale=1.0,
    )
    worst = 0.0
    for seed in range(seeds):
        rng = make_rng(seed)
        u = mx.haar_frame(8, 2, rng)
        v = mx.haar_frame(8, 2, rng)
        us = Matrix(8, 2, (u.to_numpy() * np.array([2.0, 1.6])).ravel())
        task = tk.make_linear_task(
            8, 8, tk.SpectrumSpec.flat(8), 0.01, rng,
            target=mx.matmul(us, mx.transpose(v)),
        )
        res = op.seqlora_fit([task], [Matrix.zeros(8, 8)], 2, cfg, make_rng(seed + 3000))
        last = res.traces[0].rows[-1]
        worst = max(worst, last.grad_a_norm, last.reduced_grad_b_norm)
    print(f"stationarity pilot ({seeds} seeds): worst final gradient norm {worst:.3e}"
          f" (acceptance tolerance 1e-5)")


def learned_vs_frozen_pilot(seeds: int) -> None:
    def mean_residual(fit_fn, stream, fit_rng, cfg):
        res = fit_fn(stream, [Matrix.zeros(16, 16)], 2, cfg, fit_rng)
        vals = []
        for j in range(len(stream)):
            pperp = basis_complement_projector(res.model.concepts[j][0].b)
            vals.append(mx.trace(mx.matmul(pperp, stream[j].sigma)))
        return float(np.mean(vals))

    for profile, alpha in (("spiked", 0.01), ("flat", 0.05)):
        spec = (
            tk.SpectrumSpec.spiked(16, 2, 8.0) if profile == "spiked"
            else tk.SpectrumSpec.flat(16)
        )
        cfg = op.BilevelConfig(
            bilevel_iters=20, alpha_mode="fixed", alpha=alpha,
            beta_mode="fixed", beta=alpha, init_scale=1.0,
        )
        gaps = []
        for seed in range(seeds):
            stream = tk.make_linear_stream(4, 16, 16, spec, 0.01, make_rng(seed))
            learned = mean_residual(op.seqlora_fit, stream, make_rng(seed + 500), cfg)
            frozen = mean_residual(op.frozen_basis_fit, stream, make_rng(seed + 500), cfg)
            gaps.append(frozen - learned)
        gaps = np.asarray(gaps)
        se = gaps.std(ddof=1) / np.sqrt(len(gaps))
        print(
            f"{profile} pilot ({seeds} seeds): gap mean {gaps.mean():.4f}, "
            f"SE {se:.4f}, min {gaps.min():.4f}"
        )


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, default=20)
    args = parser.parse_args()
    stationarity_pilot(args.seeds)
    learned_vs_frozen_pilot(args.seeds)


if __name__ == "__main__":
    main()
