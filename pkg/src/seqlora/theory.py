"""Desk-scale verification studies: descent audits, the exact forgetting
decomposition, optimal-basis spectral characterization, Haar Monte Carlo,
and the concentration statistics of crosstalk with end-to-end propagation
through deep streams.

Studies are read-only over frozen models and tasks; Monte Carlo loops take
explicit generators and can fan out across split streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import matrix as mx
from . import tasks as tk
from .errors import CapacityError, NumericalError, ShapeError
from .matrix import Matrix
from .registry import BasisRegistry, ComposedModel, basis_complement_projector

# psi_2 Orlicz norm of a standard Gaussian under the E[exp(Z^2/t^2)] <= 2
# convention: sqrt(8/3).  The bounded samplers use the |Z|_inf / sqrt(ln 2)
# bound for unit-variance Rademacher and uniform entries.
GAUSSIAN_SUBG_NORM = math.sqrt(8.0 / 3.0)

SUBG_SAMPLERS = {
    "gaussian": GAUSSIAN_SUBG_NORM,
    "rademacher": 1.0 / math.sqrt(math.log(2.0)),
    "uniform": math.sqrt(3.0 / math.log(2.0)),
}


def _draw_subgaussian(sampler: str, rows: int, cols: int, rng) -> Matrix:
    """Unit-variance, mean-zero entries from the configured family."""
    if sampler == "gaussian":
        return mx.gaussian_matrix(rows, cols, rng)
    if sampler == "rademacher":
        vals = rng.integers(0, 2, size=rows * cols) * 2.0 - 1.0
        return Matrix(rows, cols, vals)
    if sampler == "uniform":
        vals = (rng.random(rows * cols) * 2.0 - 1.0) * math.sqrt(3.0)
        return Matrix(rows, cols, vals)
    raise ValueError(f"unknown sampler {sampler!r}; choose from {sorted(SUBG_SAMPLERS)}")

DESCENT_AUDIT_SLACK = 1e-12


def audit_descent(trace_or_objectives) -> list[int]:
    """Indices k (1-based into the objective sequence) where the composite
    objective rose beyond relative slack; empty on conforming runs."""
    objs = getattr(trace_or_objectives, "objectives", trace_or_objectives)
    bad = []
    for k in range(1, len(objs)):
        if objs[k] > objs[k - 1] * (1.0 + DESCENT_AUDIT_SLACK):
            bad.append(k)
    return bad


@dataclass(frozen=True)
class ForgettingReport:
    """Exact decomposition of concept j's loss increase after the stream."""

    concept: int
    lhs: float
    quad_term: float
    grad_term: float
    upper_bound: float
    residual_energy: float
    grad_norm: float  # measured gradient norm at the freeze point

    def to_dict(self) -> dict:
        return {
            "concept": self.concept,
            "lhs": self.lhs,
            "quad_term": self.quad_term,
            "grad_term": self.grad_term,
            "upper_bound": self.upper_bound,
            "residual_energy": self.residual_energy,
            "grad_norm": self.grad_norm,
        }


def forgetting_decomposition(
    model: ComposedModel, task_j: tk.ConceptTask, j: int
) -> ForgettingReport:
    """Split L_j(W_T) - L_j(W_j) into the residual-subspace quadratic term
    plus the first-order term, exactly (population model, single layer).

    Requires the stream's bases to be mutually orthogonal; the identity is
    verified and a violation raises.
    """
    if task_j.kind != tk.LINEAR_POPULATION:
        raise ValueError(
            "the decomposition is exact only in the population model; "
            f"got task kind {task_j.kind!r}"
        )
    if model.num_layers != 1:
        raise ShapeError("forgetting decomposition addresses single-layer models")
    if not 0 <= j < model.num_concepts:
        raise IndexError(f"concept {j} outside [0, {model.num_concepts})")

    w_j = model.compose_weight(0, upto=j + 1)
    w_t = model.compose_weight(0)
    lhs = tk.population_loss(task_j, w_t) - tk.population_loss(task_j, w_j)

    c_j = model.crosstalk_operator(j, 0)
    p_perp = basis_complement_projector(model.concepts[j][0].b)
    pcp = mx.matmul(mx.matmul(p_perp, task_j.sigma), p_perp)
    quad = mx.trace(mx.matmul(mx.matmul(c_j, pcp), mx.transpose(c_j)))

    grad_w = tk.population_grad(task_j, w_j)
    grad_term = mx.inner(grad_w, c_j)
    grad_norm = mx.frob(grad_w)

    residual_energy = mx.trace(mx.matmul(p_perp, task_j.sigma))
    upper = mx.spectral_norm(c_j) ** 2 * residual_energy + grad_norm * mx.frob(c_j)

    gap = abs(lhs - (quad + grad_term))
    if gap > 1e-8 * (abs(lhs) + 1.0):
        raise NumericalError(
            f"decomposition identity violated for concept {j}: "
            f"|lhs - quad - grad| = {gap:.3e}; bases are likely not orthogonal"
        )
    if lhs > upper + 1e-8 * (abs(upper) + 1.0):
        raise NumericalError(
            f"upper bound violated for concept {j}: {lhs:.6e} > {upper:.6e}"
        )
    return ForgettingReport(
        concept=j,
        lhs=lhs,
        quad_term=quad,
        grad_term=grad_term,
        upper_bound=upper,
        residual_energy=residual_energy,
        grad_norm=grad_norm,
    )


@dataclass(frozen=True)
class BasisStudy:
    """Spectral characterization of the best feasible basis for one task
    covariance against Haar-random feasible competitors."""

    m: int
    r: int
    d_free: int
    sigma_trace: float
    blocked_mass: float  # energy outside the free complement
    compressed_trace: float
    compressed_spectrum: tuple[float, ...]
    optimal_captured: float
    optimal_residual: float  # closed form
    optimal_residual_direct: float  # recomputed from the eigenprojector
    expected_random_captured: float  # (r / d_free) * compressed trace
    expected_random_residual: float
    mc_trials: int
    mc_mean_captured: float
    mc_se_captured: float
    mc_mean_residual: float
    mc_min_residual: float

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["compressed_spectrum"] = list(self.compressed_spectrum)
        return d


def free_complement_basis(registry: BasisRegistry) -> Matrix:
    """Orthonormal basis (m x d_free) of the registry's free complement."""
    m = registry.m
    if len(registry) == 0:
        return Matrix.identity(m)
    u = registry._ortho_cache()
    p_free = mx.sub(Matrix.identity(m), mx.matmul(u, mx.transpose(u)))
    eig = mx.sym_eig(p_free)
    d_free = registry.free_dim
    vecs = eig.vectors.to_numpy()[:, :d_free]
    return Matrix(m, d_free, np.ascontiguousarray(vecs).ravel())


def optimal_basis_study(
    sigma: Matrix, registry: BasisRegistry, r: int, mc_trials: int, rng
) -> BasisStudy:
    """Compare the top-r eigenspace of the compressed covariance against
    Haar-random rank-r frames drawn inside the free complement."""
    m = sigma.rows
    if registry.m != m:
        raise ShapeError(f"registry dimension {registry.m} != covariance {m}")
    d_free = registry.free_dim
    if r > d_free:
        raise CapacityError(f"rank {r} exceeds the free dimension {d_free}")

    u_free = free_complement_basis(registry)  # m x d_free
    sigma_trace = mx.trace(sigma)
    # Covariance compressed into free-complement coordinates (d_free square).
    sigma_free = mx.matmul(mx.matmul(mx.transpose(u_free), sigma), u_free)
    sym = sigma_free.to_numpy()
    sigma_free = Matrix(d_free, d_free, ((sym + sym.T) / 2.0).ravel())
    compressed_trace = mx.trace(sigma_free)
    blocked = sigma_trace - compressed_trace

    eig = mx.sym_eig(sigma_free)
    spectrum = tuple(float(v) for v in eig.values)
    optimal_captured = float(np.sum(eig.values[:r]))
    tail = float(np.sum(eig.values[r:]))
    optimal_residual = blocked + tail

    # Direct recomputation through the eigenprojector in ambient space.
    v_top = eig.vectors.to_numpy()[:, :r]
    w_opt = mx.matmul(u_free, Matrix(d_free, r, np.ascontiguousarray(v_top).ravel()))
    captured_direct = mx.trace(
        mx.matmul(mx.matmul(mx.transpose(w_opt), sigma), w_opt)
    )
    optimal_residual_direct = sigma_trace - captured_direct

    captured = np.empty(mc_trials)
    for t in range(mc_trials):
        f = mx.haar_frame(d_free, r, rng)
        w = mx.matmul(u_free, f)
        captured[t] = mx.trace(mx.matmul(mx.matmul(mx.transpose(w), sigma), w))
    mean_captured = float(captured.mean())
    se_captured = float(captured.std(ddof=1) / math.sqrt(mc_trials)) if mc_trials > 1 else 0.0

    return BasisStudy(
        m=m,
        r=r,
        d_free=d_free,
        sigma_trace=sigma_trace,
        blocked_mass=blocked,
        compressed_trace=compressed_trace,
        compressed_spectrum=spectrum,
        optimal_captured=optimal_captured,
        optimal_residual=optimal_residual,
        optimal_residual_direct=optimal_residual_direct,
        expected_random_captured=(r / d_free) * compressed_trace,
        expected_random_residual=blocked + (1.0 - r / d_free) * compressed_trace,
        mc_trials=mc_trials,
        mc_mean_captured=mean_captured,
        mc_se_captured=se_captured,
        mc_mean_residual=sigma_trace - mean_captured,
        mc_min_residual=sigma_trace - float(captured.max()),
    )


@dataclass(frozen=True)
class HWReport:
    """Concentration statistics of the squared crosstalk norm."""

    mu_z: float
    empirical_mean: float
    empirical_se: float
    samples: int
    k_subg: float
    psi_trace: float
    psi_frob: float
    psi_op: float
    q_frob: float
    qtq_frob: float
    q_op: float
    r_eff_psi: float
    r_eff_qtq: float
    sampler: str
    xi_list: tuple[float, ...]
    quantiles: tuple[float, ...]  # empirical (1 - xi) quantiles of z
    c1_grid: tuple[float, ...]
    calibrated_c1: float | None  # smallest grid value covering all xi
    t_at_calibrated: tuple[float, ...]
    regime_label: str  # sub-gaussian | sub-exponential
    regime_reference_c1: float
    regime_reference_xi: float

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for key in ("xi_list", "quantiles", "c1_grid", "t_at_calibrated"):
            d[key] = list(d[key])
        return d


def hw_tail_bound(xi, c1, k_subg, psi_frob, psi_op, qtq_frob, q_op) -> float:
    """Deviation radius t(xi, C1): max of the sub-Gaussian and
    sub-exponential branches."""
    log_term = math.log(2.0 / xi)
    gauss = math.sqrt(c1) * k_subg**2 * psi_frob * qtq_frob * math.sqrt(log_term)
    expo = c1 * k_subg**2 * psi_op * q_op**2 * log_term
    return max(gauss, expo)


def effective_rank(frob_norm: float, op_norm: float) -> float:
    return frob_norm / op_norm if op_norm > 0 else 0.0


def regime_from_ranks(r_psi: float, r_qtq: float, c1: float, xi: float) -> str:
    """Arithmetic of the effective-rank threshold: large joint effective
    rank keeps the deviation in the sub-Gaussian branch."""
    return (
        "sub-gaussian"
        if r_psi * r_qtq >= math.sqrt(c1 * math.log(2.0 / xi))
        else "sub-exponential"
    )


def hw_crosstalk_study(
    sigma_perp: Matrix,
    psi: Matrix,
    c_j: Matrix,
    samples: int,
    xi_list,
    c1_grid,
    rng,
    sampler: str = "gaussian",
) -> HWReport:
    """Monte Carlo over residual activations X = sigma_perp^(1/2) Z
    psi^(1/2): distribution of z = |C_j X|_F^2 against its analytic mean
    and the two-branch deviation bound.

    ``sampler`` picks the entry family of Z (gaussian, rademacher, or
    uniform; all unit variance), each with its recorded psi_2 constant."""
    if c_j.cols != sigma_perp.rows:
        raise ShapeError(
            f"crosstalk operator is {c_j.shape}, covariance {sigma_perp.shape}"
        )
    xi_list = tuple(sorted(float(x) for x in xi_list))
    c1_grid = tuple(sorted(float(c) for c in c1_grid))
    if not xi_list or not c1_grid:
        raise ValueError("xi_list and c1_grid must be nonempty")

    s_sigma = mx.sqrt_spd(sigma_perp)
    s_psi = mx.sqrt_spd(psi)
    q = mx.matmul(c_j, s_sigma)
    p = psi.rows
    mvals = {
        "psi_trace": mx.trace(psi),
        "psi_frob": mx.frob(psi),
        "psi_op": mx.spectral_norm(psi),
        "q_frob": mx.frob(q),
        "qtq_frob": mx.frob(mx.matmul(mx.transpose(q), q)),
        "q_op": mx.spectral_norm(q),
    }
    mu_z = mvals["psi_trace"] * mvals["q_frob"] ** 2

    if sampler not in SUBG_SAMPLERS:
        raise ValueError(
            f"unknown sampler {sampler!r}; choose from {sorted(SUBG_SAMPLERS)}"
        )
    z = np.empty(samples)
    mdim = sigma_perp.rows
    for i in range(samples):
        zmat = _draw_subgaussian(sampler, mdim, p, rng)
        x = mx.matmul(mx.matmul(q, zmat), s_psi)
        z[i] = float(np.sum(x.data * x.data))
    emp_mean = float(z.mean())
    emp_se = float(z.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    quantiles = tuple(float(np.quantile(z, 1.0 - xi)) for xi in xi_list)

    k = SUBG_SAMPLERS[sampler]
    calibrated = None
    for c1 in c1_grid:
        ok = all(
            qv
            <= mu_z
            + hw_tail_bound(
                xi, c1, k, mvals["psi_frob"], mvals["psi_op"],
                mvals["qtq_frob"], mvals["q_op"],
            )
            for xi, qv in zip(xi_list, quantiles)
        )
        if ok:
            calibrated = c1
            break
    t_ref_c1 = calibrated if calibrated is not None else c1_grid[-1]
    t_at = tuple(
        hw_tail_bound(
            xi, t_ref_c1, k, mvals["psi_frob"], mvals["psi_op"],
            mvals["qtq_frob"], mvals["q_op"],
        )
        for xi in xi_list
    )

    r_psi = effective_rank(mvals["psi_frob"], mvals["psi_op"])
    r_qtq = effective_rank(mvals["qtq_frob"], mvals["q_op"] ** 2)
    ref_c1, ref_xi = 1.0, xi_list[0]
    label = regime_from_ranks(r_psi, r_qtq, ref_c1, ref_xi)

    return HWReport(
        mu_z=mu_z,
        empirical_mean=emp_mean,
        empirical_se=emp_se,
        samples=samples,
        k_subg=k,
        sampler=sampler,
        r_eff_psi=r_psi,
        r_eff_qtq=r_qtq,
        xi_list=xi_list,
        quantiles=quantiles,
        c1_grid=c1_grid,
        calibrated_c1=calibrated,
        t_at_calibrated=t_at,
        regime_label=label,
        regime_reference_c1=ref_c1,
        regime_reference_xi=ref_xi,
        **mvals,
    )


@dataclass(frozen=True)
class E2EReport:
    """Measured multi-layer forgetting against the propagated bound."""

    concept: int
    empirical_forgetting: float
    bound_value: float  # with per-layer concentration terms, union-adjusted
    bound_deterministic: float  # with measured per-layer crosstalk norms
    gammas: tuple[float, ...]
    amplification: tuple[float, ...]  # Gamma_ell per layer
    delta_norms: tuple[float, ...]  # measured |C_j X_j|_F per layer
    hw_delta_bounds: tuple[float, ...]  # sqrt(mu + t) per layer, xi/L level
    hw_delta_bounds_raw_xi: tuple[float, ...]  # same at unadjusted xi
    l_out: float
    xi: float
    c1: float
    looseness: float

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for key in (
            "gammas", "amplification", "delta_norms",
            "hw_delta_bounds", "hw_delta_bounds_raw_xi",
        ):
            d[key] = list(d[key])
        return d


def e2e_forgetting_bound(
    model: ComposedModel,
    task_j: tk.ConceptTask,
    j: int,
    xi: float,
    c1: float,
    rng,
    holdout_columns: int | None = None,
) -> E2EReport:
    """Measure concept j's loss increase under the fully composed deep
    model on a held-out batch and compare against the layer-propagated
    bound with per-layer concentration radii at level xi/L (union bound
    over layers; the unadjusted-xi radii are reported alongside)."""
    if task_j.kind != tk.DEEP:
        raise ValueError("end-to-end study requires a deep task")
    if task_j.l_out is None:
        raise ValueError("task is missing the output Lipschitz estimate")
    if not 0 <= j < model.num_concepts:
        raise IndexError(f"concept {j} outside [0, {model.num_concepts})")
    nl = model.num_layers

    p = holdout_columns or task_j.p
    x, y = tk.sample_batch(task_j, p, rng)

    weights_j = [model.compose_weight(ell, upto=j + 1) for ell in range(nl)]
    weights_t = [model.compose_weight(ell) for ell in range(nl)]
    acts_j = tk.forward_layers(task_j, weights_j, x)
    loss_j = tk.batch_mse(acts_j[-1], y)
    loss_t = tk.batch_mse(tk.forward_layers(task_j, weights_t, x)[-1], y)
    empirical = loss_t - loss_j

    gammas = task_j.gammas
    amp = []
    for ell in range(nl):
        g = 1.0
        for later in range(ell + 1, nl):
            g *= gammas[later] * mx.spectral_norm(weights_t[later])
        amp.append(g)

    delta_norms = []
    hw_bounds_union = []
    hw_bounds_raw = []
    for ell in range(nl):
        c_ell = model.crosstalk_operator(j, ell)
        x_ell = acts_j[ell]
        delta_norms.append(mx.frob(mx.matmul(c_ell, x_ell)))

        p_perp = basis_complement_projector(model.concepts[j][ell].b)
        xp = mx.matmul(p_perp, x_ell)
        cov = mx.scale(mx.matmul(xp, mx.transpose(xp)), 1.0 / p)
        covn = cov.to_numpy()
        cov = Matrix(cov.rows, cov.cols, ((covn + covn.T) / 2.0).ravel())
        q = mx.matmul(c_ell, mx.sqrt_spd(cov))
        q_frob = mx.frob(q)
        qtq_frob = mx.frob(mx.matmul(mx.transpose(q), q))
        q_op = mx.spectral_norm(q)
        # Token covariance of the held-out batch is the identity.
        psi_trace, psi_frob, psi_op = float(p), math.sqrt(p), 1.0
        mu = psi_trace * q_frob**2
        for level, sink in ((xi / nl, hw_bounds_union), (xi, hw_bounds_raw)):
            t = hw_tail_bound(
                level, c1, GAUSSIAN_SUBG_NORM, psi_frob, psi_op, qtq_frob, q_op
            )
            sink.append(math.sqrt(mu + t))

    l_out = task_j.l_out
    bound_det = l_out * sum(a * d for a, d in zip(amp, delta_norms))
    bound_hw = l_out * sum(a * d for a, d in zip(amp, hw_bounds_union))
    return E2EReport(
        concept=j,
        empirical_forgetting=empirical,
        bound_value=bound_hw,
        bound_deterministic=bound_det,
        gammas=tuple(gammas),
        amplification=tuple(amp),
        delta_norms=tuple(delta_norms),
        hw_delta_bounds=tuple(hw_bounds_union),
        hw_delta_bounds_raw_xi=tuple(hw_bounds_raw),
        l_out=l_out,
        xi=xi,
        c1=c1,
        looseness=bound_hw / max(abs(empirical), 1e-30),
    )
