"""The bilevel sequential fitter, the alternating-minimization baseline,
and the frozen-random-basis baseline, plus secant-based step-size
constants and per-iteration descent traces.

A fitter instance walks one stream single-threaded (sequentiality is the
point); independent trials with different seeds or configs can run
concurrently since nothing mutable is shared.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import gradients as gr
from . import matrix as mx
from .errors import CapacityError, NumericalError
from .registry import BasisRegistry, ComposedModel, LoRAFactorPair
from .rng import split

OPTIMIZERS = ("seqlora", "alternating", "frozen")

SAFETY_FACTOR = 1.5
DESCENT_SLACK = 1e-10
MAX_HALVINGS = 40


@dataclass(frozen=True)
class BilevelConfig:
    bilevel_iters: int = 3  # K
    local_b_steps: int = 2  # S_B
    local_a_steps: int = 2  # S_A'
    alpha_mode: str = "theoretical"  # theoretical | fixed
    alpha: float | None = None
    beta_mode: str = "theoretical"
    beta: float | None = None
    epsilon: float = 1e-8
    hessian_point: str = "outer-iterate"  # outer-iterate | local-iterate
    a_restart: str = "outer"  # outer | tentative
    init_scale: float = 0.1

    def __post_init__(self):
        if min(self.bilevel_iters, self.local_b_steps, self.local_a_steps) < 1:
            raise ValueError("iteration counts must be at least 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.alpha_mode not in ("theoretical", "fixed"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.beta_mode not in ("theoretical", "fixed"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.alpha_mode == "fixed" and not self.alpha:
            raise ValueError("alpha_mode=fixed requires a positive alpha")
        if self.beta_mode == "fixed" and not self.beta:
            raise ValueError("beta_mode=fixed requires a positive beta")
        if self.hessian_point not in ("outer-iterate", "local-iterate"):
            raise ValueError(f"unknown hessian_point {self.hessian_point!r}")
        if self.a_restart not in ("outer", "tentative"):
            raise ValueError(f"unknown a_restart {self.a_restart!r}")


@dataclass(frozen=True)
class StepConstants:
    """Safety-padded smoothness estimates feeding the theoretical steps.

    ``l_phi`` follows the reduced-objective bound L (1 + a L)^2 + a rho M
    evaluated at a = 1/(2 L).  The ``raw_*`` fields are the bare secant
    maxima before the safety factor.
    """

    l_hat: float
    rho_hat: float
    m_hat: float
    l_phi: float
    raw_l: float
    raw_rho: float
    raw_m: float

    def __post_init__(self):
        if self.l_hat <= 0 or self.m_hat <= 0:
            raise NumericalError("smoothness constants must be positive")
        assert self.l_phi >= self.l_hat

    @property
    def alpha_star(self) -> float:
        return 1.0 / (2.0 * self.l_hat)

    @property
    def beta_star(self) -> float:
        return 1.0 / (2.0 * self.l_phi)


@dataclass(frozen=True)
class TraceRow:
    """State after one bilevel iteration (row 0 is the initial state)."""

    iteration: int
    objective: float
    feasible: bool
    grad_a_norm: float
    reduced_grad_b_norm: float
    alpha: float
    beta: float
    l_hat: float
    l_phi: float
    feasibility_defect: float
    halvings: int
    wall_ms: float


@dataclass
class DescentTrace:
    concept: int
    optimizer: str
    rows: list[TraceRow] = field(default_factory=list)

    @property
    def objectives(self) -> list[float]:
        return [r.objective for r in self.rows]


@dataclass
class FitResult:
    model: ComposedModel
    traces: list[DescentTrace]
    registries: list[BasisRegistry]


def _joint_norm(mats) -> float:
    return math.sqrt(sum(float(np.sum(m.data * m.data)) for m in mats))


def _ball_point(center, radius, rng):
    """Uniform-radius random point in a joint Frobenius ball."""
    bumps = [mx.gaussian_matrix(c.rows, c.cols, rng) for c in center]
    nrm = _joint_norm(bumps)
    r = radius * float(rng.random())
    return [mx.add(c, mx.scale(u, r / nrm)) for c, u in zip(center, bumps)]


def estimate_constants_for(
    obj,
    a_list,
    b_list,
    rng,
    pairs: int = 200,
    radius: float = 10.0,
    safety: float = SAFETY_FACTOR,
) -> StepConstants:
    """Secant estimates of the joint smoothness L, the contraction
    Lipschitz constant rho, and the A-gradient bound M, over random pairs
    in a ball around the current iterate.

    Multi-layer objectives are probed one layer at a time and the most
    conservative (largest) layer estimate governs, since a single step
    size is shared across layers.
    """
    nl = len(a_list)
    raw_l = 0.0
    raw_m = 0.0
    for ell in range(nl):
        for _ in range(pairs):
            z1 = _ball_point([a_list[ell], b_list[ell]], radius, rng)
            z2 = _ball_point([a_list[ell], b_list[ell]], radius, rng)
            a1, b1 = list(a_list), list(b_list)
            a2, b2 = list(a_list), list(b_list)
            a1[ell], b1[ell] = z1
            a2[ell], b2[ell] = z2
            _, g1 = obj.loss_and_grads(a1, b1)
            _, g2 = obj.loss_and_grads(a2, b2)
            gap = _joint_norm(
                [mx.sub(p.grad_a, q.grad_a) for p, q in zip(g1, g2)]
                + [mx.sub(p.grad_b, q.grad_b) for p, q in zip(g1, g2)]
            )
            dist = _joint_norm([mx.sub(p, q) for p, q in zip(z1, z2)])
            if dist > 0:
                raw_l = max(raw_l, gap / dist)
            raw_m = max(raw_m, _joint_norm([g.grad_a for g in g1]))
            raw_m = max(raw_m, _joint_norm([g.grad_a for g in g2]))

    raw_rho = 0.0
    for ell in range(nl):
        for _ in range(pairs):
            b1, b2 = list(b_list), list(b_list)
            b1[ell] = _ball_point([b_list[ell]], radius, rng)[0]
            b2[ell] = _ball_point([b_list[ell]], radius, rng)[0]
            g = mx.gaussian_matrix(a_list[ell].rows, a_list[ell].cols, rng)
            g = mx.scale(g, 1.0 / mx.frob(g))
            gap = mx.frob(
                mx.sub(
                    obj.cross_hessian(ell, a_list, b1, g),
                    obj.cross_hessian(ell, a_list, b2, g),
                )
            )
            dist = mx.frob(mx.sub(b1[ell], b2[ell]))
            if dist > 0:
                raw_rho = max(raw_rho, gap / dist)

    if raw_l == 0.0 and raw_m == 0.0:
        raise NumericalError("degenerate task: all sampled gradients vanish")

    l_hat = safety * raw_l
    rho_hat = safety * raw_rho
    m_hat = safety * raw_m
    alpha = 1.0 / (2.0 * l_hat)
    l_phi = l_hat * (1.0 + alpha * l_hat) ** 2 + alpha * rho_hat * m_hat
    return StepConstants(
        l_hat=l_hat,
        rho_hat=rho_hat,
        m_hat=m_hat,
        l_phi=l_phi,
        raw_l=raw_l,
        raw_rho=raw_rho,
        raw_m=raw_m,
    )


def estimate_constants(task, w0, a, b, rng, **kwargs) -> StepConstants:
    """Single-layer entry point over a task's gradient oracles."""
    obj = gr.Objective(task, [w0])
    return estimate_constants_for(obj, [a], [b], rng, **kwargs)


class _ConceptFitter:
    """Runs Algorithm-style bilevel iterations for one concept."""

    def __init__(self, obj, regs, cfg: BilevelConfig, mode: str):
        self.obj = obj
        self.regs = regs
        self.cfg = cfg
        self.mode = mode

    def reduced_gradients(self, a_outer, b_outer, a_eval, b_eval, alpha):
        """Per-layer reduced gradient at (a_eval, b_eval) with the
        contraction pinned per the configured evaluation point."""
        _, grads = self.obj.loss_and_grads(a_eval, b_eval)
        out = []
        for ell in range(len(a_outer)):
            g_b = grads[ell].grad_b
            if self.mode == "alternating":
                out.append(g_b)
                continue
            b_pin = b_outer if self.cfg.hessian_point == "outer-iterate" else b_eval
            h = self.obj.cross_hessian(ell, a_outer, b_pin, grads[ell].grad_a)
            out.append(mx.sub(g_b, mx.scale(h, alpha)))
        return out

    def iterate(self, a_list, b_list, alpha, beta):
        """One bilevel iteration: tentative A step, S_B projected B steps,
        S_A' final A steps restarted per the configured policy."""
        cfg = self.cfg
        _, grads0 = self.obj.loss_and_grads(a_list, b_list)
        a_tilde = [
            mx.sub(a, mx.scale(g.grad_a, alpha)) for a, g in zip(a_list, grads0)
        ]

        b_cur = list(b_list)
        for _ in range(cfg.local_b_steps):
            gphi = self.reduced_gradients(a_list, b_list, a_tilde, b_cur, alpha)
            b_cur = [
                reg.project(mx.sub(b, mx.scale(g, beta)))
                for reg, b, g in zip(self.regs, b_cur, gphi)
            ]

        a_cur = list(a_list) if cfg.a_restart == "outer" else list(a_tilde)
        for _ in range(cfg.local_a_steps):
            _, grads = self.obj.loss_and_grads(a_cur, b_cur)
            a_cur = [
                mx.sub(a, mx.scale(g.grad_a, alpha)) for a, g in zip(a_cur, grads)
            ]
        return a_cur, b_cur

    def frozen_iterate(self, a_list, b_list, alpha, steps):
        """Gradient steps on A only (B frozen), budget-matched."""
        a_cur = list(a_list)
        for _ in range(steps):
            _, grads = self.obj.loss_and_grads(a_cur, b_list)
            a_cur = [
                mx.sub(a, mx.scale(g.grad_a, alpha)) for a, g in zip(a_cur, grads)
            ]
        return a_cur, list(b_list)

    def stationarity(self, a_list, b_list, alpha):
        """(||grad_A L||, ||P_free grad_B Phi||) at an iterate."""
        _, grads = self.obj.loss_and_grads(a_list, b_list)
        ga = _joint_norm([g.grad_a for g in grads])
        a_tilde = [
            mx.sub(a, mx.scale(g.grad_a, alpha)) for a, g in zip(a_list, grads)
        ]
        gphi = self.reduced_gradients(a_list, b_list, a_tilde, b_list, alpha)
        projected = [reg.project(g) for reg, g in zip(self.regs, gphi)]
        return ga, _joint_norm(projected)

    def feasibility_defect(self, b_list) -> float:
        worst = 0.0
        for reg, b in zip(self.regs, b_list):
            if len(reg) == 0:
                continue
            bn = mx.frob(b)
            if bn == 0.0:
                continue
            overlap = mx.frob(mx.matmul(mx.transpose(reg.stacked()), b))
            worst = max(worst, overlap / bn)
        return worst


def _init_factors(obj, rank, cfg, rng):
    a_list, b_list = [], []
    for (n, _), (m, _) in obj.factor_shapes(rank):
        a_list.append(
            mx.gaussian_matrix(n, rank, rng, scale=cfg.init_scale / math.sqrt(n))
        )
        b_list.append(
            mx.gaussian_matrix(m, rank, rng, scale=cfg.init_scale / math.sqrt(m))
        )
    return a_list, b_list


def _fit_stream(stream, w0s, rank, cfg, rng, mode) -> FitResult:
    if mode not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {mode!r}")
    if not stream:
        raise ValueError("concept stream is empty")
    model = ComposedModel(list(w0s))
    regs = [
        BasisRegistry(w.cols, epsilon=cfg.epsilon, layer=ell)
        for ell, w in enumerate(w0s)
    ]
    traces: list[DescentTrace] = []
    concept_rngs = split(rng, len(stream))

    for j, task in enumerate(stream):
        for ell, reg in enumerate(regs):
            if reg.free_dim < rank:
                raise CapacityError(
                    f"concept {j}: layer {ell} has {reg.free_dim} free dimensions, "
                    f"rank {rank} does not fit (capacity {reg.m // rank} concepts)"
                )
        init_rng, const_rng, frozen_rng = split(concept_rngs[j], 3)
        w_base = [model.compose_weight(ell, upto=j) for ell in range(model.num_layers)]
        obj = gr.Objective(task, w_base)
        fitter = _ConceptFitter(obj, regs, cfg, mode)

        a_list, b_list = _init_factors(obj, rank, cfg, init_rng)
        if mode == "frozen":
            # Haar frame inside the free complement, re-orthonormalized.
            b_list = [
                mx.orthonormalize(reg.project(mx.haar_frame(reg.m, rank, frozen_rng)))
                for reg in regs
            ]
        else:
            b_list = [reg.project(b) for reg, b in zip(regs, b_list)]

        consts = None
        if cfg.alpha_mode == "theoretical" or cfg.beta_mode == "theoretical":
            consts = estimate_constants_for(obj, a_list, b_list, const_rng)
        alpha = cfg.alpha if cfg.alpha_mode == "fixed" else consts.alpha_star
        beta = cfg.beta if cfg.beta_mode == "fixed" else consts.beta_star
        theoretical = cfg.alpha_mode == "theoretical" and cfg.beta_mode == "theoretical"

        trace = DescentTrace(concept=j, optimizer=mode)
        loss_cur, _ = obj.loss_and_grads(a_list, b_list)
        trace.rows.append(
            _trace_row(fitter, 0, loss_cur, a_list, b_list, alpha, beta, consts, 0, 0.0)
        )

        for k in range(1, cfg.bilevel_iters + 1):
            t0 = time.perf_counter()
            halvings = 0
            while True:
                if mode == "frozen":
                    a_next, b_next = fitter.frozen_iterate(
                        a_list, b_list, alpha, cfg.local_b_steps + cfg.local_a_steps
                    )
                else:
                    a_next, b_next = fitter.iterate(a_list, b_list, alpha, beta)
                loss_next, _ = obj.loss_and_grads(a_next, b_next)
                if not math.isfinite(loss_next):
                    raise NumericalError(
                        f"non-finite loss at concept {j}, iteration {k} "
                        f"(alpha={alpha:.3e}, beta={beta:.3e}, "
                        f"|A|={_joint_norm(a_next):.3e}, |B|={_joint_norm(b_next):.3e})"
                    )
                violation = loss_next > loss_cur + DESCENT_SLACK * abs(loss_cur)
                if not (theoretical and violation) or halvings >= MAX_HALVINGS:
                    break
                # The smoothness estimate undershot: halve, re-estimate, retry.
                halvings += 1
                consts = estimate_constants_for(obj, a_list, b_list, const_rng)
                alpha = min(alpha / 2.0, consts.alpha_star)
                beta = min(beta / 2.0, consts.beta_star)
            a_list, b_list = a_next, b_next
            loss_cur = loss_next
            wall_ms = (time.perf_counter() - t0) * 1e3
            trace.rows.append(
                _trace_row(
                    fitter, k, loss_cur, a_list, b_list, alpha, beta, consts,
                    halvings, wall_ms,
                )
            )

        pairs = []
        for ell, reg in enumerate(regs):
            reg.append_basis(b_list[ell])
            pairs.append(LoRAFactorPair(layer=ell, a=a_list[ell], b=b_list[ell]))
        model.append_concept(pairs)
        traces.append(trace)

    return FitResult(model=model, traces=traces, registries=regs)


def _trace_row(fitter, k, loss, a_list, b_list, alpha, beta, consts, halvings,
               wall_ms) -> TraceRow:
    ga, gb = fitter.stationarity(a_list, b_list, alpha)
    defect = fitter.feasibility_defect(b_list)
    feas_tol = max(1e-8, 2.0 * fitter.cfg.epsilon)
    return TraceRow(
        iteration=k,
        objective=loss,
        feasible=defect <= feas_tol,
        grad_a_norm=ga,
        reduced_grad_b_norm=gb,
        alpha=alpha,
        beta=beta,
        l_hat=consts.l_hat if consts else 0.0,
        l_phi=consts.l_phi if consts else 0.0,
        feasibility_defect=defect,
        halvings=halvings,
        wall_ms=wall_ms,
    )


def seqlora_fit(stream, w0s, rank, cfg: BilevelConfig, rng) -> FitResult:
    """Bilevel descent with the cross-factor coupling term and regularized
    projection; concepts processed in order, bases frozen and appended."""
    return _fit_stream(stream, w0s, rank, cfg, rng, "seqlora")


def alternating_fit(stream, w0s, rank, cfg: BilevelConfig, rng) -> FitResult:
    """Identical schedule but the B-direction is the plain partial
    gradient at the updated A (no coupling term)."""
    return _fit_stream(stream, w0s, rank, cfg, rng, "alternating")


def frozen_basis_fit(stream, w0s, rank, cfg: BilevelConfig, rng) -> FitResult:
    """Random feasible bases drawn once and frozen; only A is optimized,
    with the same total gradient-step budget per concept."""
    return _fit_stream(stream, w0s, rank, cfg, rng, "frozen")
