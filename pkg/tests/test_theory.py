import pytest

from seqlora import matrix as mx
from seqlora import optimizers as op
from seqlora import tasks as tk
from seqlora import theory as th
from seqlora.errors import CapacityError, NumericalError
from seqlora.matrix import Matrix
from seqlora.registry import BasisRegistry, ComposedModel, LoRAFactorPair
from seqlora.rng import make_rng


def fixed_cfg(alpha, K=10, **kw):
    return op.BilevelConfig(
        bilevel_iters=K, alpha_mode="fixed", alpha=alpha,
        beta_mode="fixed", beta=alpha, init_scale=1.0, **kw,
    )


def fitted_linear(seed, count=4, m=12, n=12, r=2, K=8, alpha=0.05, spec=None):
    spec = spec or tk.SpectrumSpec.geometric(m, 0.8)
    stream = tk.make_linear_stream(count, m, n, spec, 0.01, make_rng(seed))
    res = op.seqlora_fit(
        stream, [Matrix.zeros(n, m)], r, fixed_cfg(alpha, K=K), make_rng(seed + 999)
    )
    return stream, res


class TestAuditDescent:
    def test_strictly_decreasing_is_clean(self):
        assert th.audit_descent([5.0, 4.0, 3.0, 2.9]) == []

    def test_injected_bump_is_flagged(self):
        assert th.audit_descent([5.0, 4.0, 4.5, 3.0]) == [2]

    def test_full_run_is_clean(self):
        _, res = fitted_linear(0)
        for trace in res.traces:
            assert th.audit_descent(trace) == []


class TestForgettingDecomposition:
    def test_last_concept_all_zero(self):
        stream, res = fitted_linear(1)
        rep = th.forgetting_decomposition(res.model, stream[-1], len(stream) - 1)
        assert rep.lhs == rep.quad_term == rep.grad_term == 0.0

    def test_identity_on_fitted_stream(self):
        stream, res = fitted_linear(2)
        for j in range(len(stream)):
            rep = th.forgetting_decomposition(res.model, stream[j], j)
            gap = abs(rep.lhs - (rep.quad_term + rep.grad_term))
            assert gap <= 1e-8 * (abs(rep.lhs) + 1.0)
            assert rep.lhs <= rep.upper_bound + 1e-8 * (abs(rep.upper_bound) + 1.0)

    def test_isotropic_orthogonal_crosstalk_case(self):
        # Sigma = I and crosstalk rows inside the complement of col(B_j):
        # the quadratic term collapses to |C_j|_F^2.
        m, n, r = 6, 4, 1
        task = tk.make_linear_task(
            m, n, tk.SpectrumSpec.flat(m), 0.0, make_rng(3), target=Matrix.zeros(n, m)
        )
        reg = BasisRegistry(m, epsilon=0.0)
        model = ComposedModel([Matrix.zeros(n, m)])
        rng = make_rng(4)
        for _ in range(3):
            b = reg.project(mx.gaussian_matrix(m, r, rng))
            reg.append_basis(b)
            model.append_concept([LoRAFactorPair(0, mx.gaussian_matrix(n, r, rng), b)])
        rep = th.forgetting_decomposition(model, task, 0)
        c0 = model.crosstalk_operator(0, 0)
        assert abs((rep.lhs - rep.grad_term) - mx.frob(c0) ** 2) <= 1e-9 * (
            mx.frob(c0) ** 2 + 1.0
        )

    def test_stationary_case_identity(self):
        # Drive concept 0 to an exactly reachable optimum (rank-2 target,
        # empty constraint set) so its full-weight gradient vanishes; the
        # first-order term then drops out of the decomposition.
        rng = make_rng(60)
        stream = []
        for child in rng.spawn(2):
            u = mx.haar_frame(8, 2, child)
            v = mx.haar_frame(8, 2, child)
            import numpy as np

            us = Matrix(8, 2, (u.to_numpy() * np.array([2.0, 1.6])).ravel())
            stream.append(
                tk.make_linear_task(
                    8, 8, tk.SpectrumSpec.flat(8), 0.0, child,
                    target=mx.matmul(us, mx.transpose(v)),
                )
            )
        cfg = op.BilevelConfig(
            bilevel_iters=50, local_b_steps=4, local_a_steps=4,
            alpha_mode="fixed", alpha=0.08, beta_mode="fixed", beta=0.08,
            init_scale=1.0,
        )
        res = op.seqlora_fit(stream, [Matrix.zeros(8, 8)], 2, cfg, make_rng(61))
        rep = th.forgetting_decomposition(res.model, stream[0], 0)
        assert rep.grad_norm <= 1e-6
        assert abs(rep.lhs - rep.quad_term) <= 1e-8 * (abs(rep.lhs) + 1.0)

    def test_rejects_sampled_tasks(self):
        stream, res = fitted_linear(5, count=2)
        sampled = tk.make_linear_task(
            12, 12, tk.SpectrumSpec.flat(12), 0.0, make_rng(6),
            kind=tk.LINEAR_SAMPLED, p=8,
        )
        with pytest.raises(ValueError, match="population"):
            th.forgetting_decomposition(res.model, sampled, 0)

    def test_non_orthogonal_model_is_caught(self):
        task = tk.make_linear_task(
            4, 4, tk.SpectrumSpec.flat(4), 0.0, make_rng(7), target=Matrix.zeros(4, 4)
        )
        model = ComposedModel([Matrix.zeros(4, 4)])
        rng = make_rng(8)
        shared = mx.gaussian_matrix(4, 1, rng)
        for _ in range(2):  # deliberately identical (non-orthogonal) bases
            model.append_concept([LoRAFactorPair(0, mx.gaussian_matrix(4, 1, rng), shared)])
        with pytest.raises(NumericalError, match="orthogonal"):
            th.forgetting_decomposition(model, task, 0)


class TestOptimalBasisStudy:
    def test_diagonal_spectrum_read_off(self):
        sigma = Matrix.diag([3.0, 2.0, 1.0])
        study = th.optimal_basis_study(sigma, BasisRegistry(3), 1, 200, make_rng(9))
        assert abs(study.optimal_captured - 3.0) <= 1e-10
        assert abs(study.optimal_residual - 3.0) <= 1e-10
        assert abs(study.expected_random_captured - 2.0) <= 1e-12
        assert abs(study.expected_random_residual - 4.0) <= 1e-12

    def test_haar_mean_matches_proposition(self):
        sigma = Matrix.diag([3.0, 2.0, 1.0])
        study = th.optimal_basis_study(sigma, BasisRegistry(3), 1, 20_000, make_rng(10))
        gap = abs(study.mc_mean_captured - study.expected_random_captured)
        assert gap <= 3.0 * study.mc_se_captured

    def test_domination_and_closed_form_with_registry(self):
        rng = make_rng(11)
        m, r = 10, 2
        reg = BasisRegistry(m, epsilon=0.0)
        for _ in range(2):
            reg.append_basis(reg.project(mx.gaussian_matrix(m, 2, rng)))
        sigma = tk.covariance_from_spectrum(tk.SpectrumSpec.geometric(m, 0.7), rng)
        study = th.optimal_basis_study(sigma, reg, r, 1000, make_rng(12))
        assert study.d_free == 6
        assert abs(study.optimal_residual - study.optimal_residual_direct) <= 1e-8
        assert study.optimal_residual <= study.mc_min_residual + 1e-10
        # Blocked mass plus compressed trace recovers the full trace.
        assert abs(
            study.blocked_mass + study.compressed_trace - study.sigma_trace
        ) <= 1e-10

    def test_capacity_error(self):
        with pytest.raises(CapacityError):
            th.optimal_basis_study(
                Matrix.identity(4), BasisRegistry(4), 5, 10, make_rng(13)
            )


class TestHWStudy:
    GRID = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
    XIS = (0.1, 0.05, 0.01)

    def test_zero_crosstalk_degenerates_cleanly(self):
        rep = th.hw_crosstalk_study(
            Matrix.identity(4), Matrix.identity(3), Matrix.zeros(2, 4),
            50, self.XIS, self.GRID, make_rng(14),
        )
        assert rep.mu_z == 0.0
        assert rep.empirical_mean == 0.0
        assert all(q == 0.0 for q in rep.quantiles)

    def test_mean_identity_identity_covariances(self):
        # Psi = I_p and Sigma = I: mu_z = p * |C|_F^2.
        rng = make_rng(15)
        c = mx.gaussian_matrix(3, 5, rng)
        p = 6
        rep = th.hw_crosstalk_study(
            Matrix.identity(5), Matrix.identity(p), c,
            20_000, self.XIS, self.GRID, make_rng(16),
        )
        want = p * mx.frob(c) ** 2
        assert abs(rep.mu_z - want) <= 1e-10 * want
        assert abs(rep.empirical_mean - rep.mu_z) <= 3.0 * rep.empirical_se

    def test_regime_labels_flip_between_flat_and_spiked(self):
        m, n, p = 8, 6, 4
        c = mx.transpose(mx.haar_frame(m, n, make_rng(17)))  # orthonormal rows
        tr = float(m)
        flat = Matrix.identity(m)
        spiked = Matrix.diag([tr - (m - 1) * 0.01] + [0.01] * (m - 1))
        rep_flat = th.hw_crosstalk_study(
            flat, Matrix.identity(p), c, 500, self.XIS, self.GRID, make_rng(18)
        )
        rep_spiked = th.hw_crosstalk_study(
            spiked, Matrix.identity(p), c, 500, self.XIS, self.GRID, make_rng(18)
        )
        assert rep_flat.regime_label == "sub-gaussian"
        assert rep_spiked.regime_label == "sub-exponential"

    def test_regime_matches_rank_arithmetic(self):
        rng = make_rng(19)
        rep = th.hw_crosstalk_study(
            tk.covariance_from_spectrum(tk.SpectrumSpec.geometric(6, 0.5), rng),
            Matrix.identity(5),
            mx.gaussian_matrix(4, 6, rng),
            200, self.XIS, self.GRID, make_rng(20),
        )
        want = th.regime_from_ranks(
            rep.r_eff_psi, rep.r_eff_qtq, rep.regime_reference_c1, rep.regime_reference_xi
        )
        assert rep.regime_label == want

    @pytest.mark.parametrize("sampler", ["rademacher", "uniform"])
    def test_alternative_subgaussian_samplers(self, sampler):
        # Bounded unit-variance entry families: the mean identity still
        # holds and the recorded psi_2 constant switches with the flag.
        rng = make_rng(40)
        c = mx.gaussian_matrix(3, 5, rng)
        rep = th.hw_crosstalk_study(
            Matrix.identity(5), Matrix.identity(4), c, 20_000,
            self.XIS, self.GRID, make_rng(41), sampler=sampler,
        )
        assert rep.sampler == sampler
        assert rep.k_subg == th.SUBG_SAMPLERS[sampler]
        assert abs(rep.empirical_mean - rep.mu_z) <= 3.0 * rep.empirical_se

    def test_unknown_sampler_rejected(self):
        with pytest.raises(ValueError, match="sampler"):
            th.hw_crosstalk_study(
                Matrix.identity(2), Matrix.identity(2), Matrix.zeros(2, 2),
                10, self.XIS, self.GRID, make_rng(42), sampler="cauchy",
            )

    def test_some_grid_value_calibrates(self):
        rng = make_rng(21)
        rep = th.hw_crosstalk_study(
            Matrix.identity(6), Matrix.identity(4), mx.gaussian_matrix(4, 6, rng),
            5000, self.XIS, self.GRID, make_rng(22),
        )
        assert rep.calibrated_c1 in self.GRID
        for qv, t in zip(rep.quantiles, rep.t_at_calibrated):
            assert qv <= rep.mu_z + t


def deep_fitted(seed, T=4, width=16, out=12, r=2, K=4, p=24):
    rng = make_rng(seed)
    stream = [
        tk.make_deep_task(
            [width, width, width, out], "tanh", tk.SpectrumSpec.flat(width),
            0.01, child, p=p,
        )
        for child in rng.spawn(T)
    ]
    w0s = [
        Matrix.zeros(width, width),
        Matrix.zeros(width, width),
        Matrix.zeros(out, width),
    ]
    cfg = op.BilevelConfig(
        bilevel_iters=K, alpha_mode="fixed", alpha=0.05, beta_mode="fixed",
        beta=0.05, init_scale=0.5,
    )
    res = op.seqlora_fit(stream, w0s, r, cfg, make_rng(seed + 999))
    return stream, res


class TestE2EBound:
    def test_last_concept_both_sides_zero(self):
        stream, res = deep_fitted(23, T=2, width=8, out=6, K=2, p=8)
        rep = th.e2e_forgetting_bound(res.model, stream[1], 1, 0.05, 1.0, make_rng(24))
        assert rep.empirical_forgetting == 0.0
        assert rep.bound_value == 0.0

    def test_single_layer_amplification_is_empty_product(self):
        # Hand-built one-layer deep task: Gamma_1 = 1 and the deterministic
        # bound reduces to l_out * |Delta|_F.
        rng = make_rng(25)
        m, n, p = 6, 4, 8
        target = mx.gaussian_matrix(n, m, rng, scale=0.5)
        x = mx.gaussian_matrix(m, p, rng)
        y = mx.matmul(target, x)
        task = tk.ConceptTask(
            kind=tk.DEEP, targets=(target,), sigma=Matrix.identity(m), psi=None,
            noise_std=0.0, p=p, activation="identity", gammas=(1.0,), l_out=2.5,
            x_train=x, y_train=y, sqrt_sigma=Matrix.identity(m),
        )
        model = ComposedModel([Matrix.zeros(n, m)])
        reg = BasisRegistry(m, epsilon=0.0)
        r2 = make_rng(26)
        for _ in range(2):
            b = reg.project(mx.gaussian_matrix(m, 1, r2))
            reg.append_basis(b)
            model.append_concept([LoRAFactorPair(0, mx.gaussian_matrix(n, 1, r2), b)])
        rep = th.e2e_forgetting_bound(model, task, 0, 0.05, 1.0, make_rng(27))
        assert rep.amplification == (1.0,)
        assert abs(
            rep.bound_deterministic - rep.l_out * rep.delta_norms[0]
        ) <= 1e-12 * (1.0 + rep.bound_deterministic)

    def test_bound_holds_on_fitted_streams(self):
        for seed in (28, 29):
            stream, res = deep_fitted(seed)
            for j in range(len(stream)):
                rep = th.e2e_forgetting_bound(
                    res.model, stream[j], j, 0.05, 1.0, make_rng(seed + 50 + j)
                )
                assert rep.empirical_forgetting <= rep.bound_value
                assert rep.bound_value <= rep.bound_deterministic * 1e6  # finite

    def test_missing_l_out_rejected(self):
        stream, res = deep_fitted(30, T=2, width=8, out=6, K=2, p=8)
        import dataclasses

        broken = dataclasses.replace(stream[0], l_out=None)
        with pytest.raises(ValueError, match="Lipschitz"):
            th.e2e_forgetting_bound(res.model, broken, 0, 0.05, 1.0, make_rng(31))


class TestAnnihilationInvariant:
    def test_fitted_stream_crosstalk_annihilation(self):
        from seqlora.registry import basis_projector

        stream, res = fitted_linear(32, count=5, m=15, r=3, K=5)
        for j in range(len(stream)):
            cj = res.model.crosstalk_operator(j, 0)
            pj = basis_projector(res.model.concepts[j][0].b)
            overlap = mx.frob(mx.matmul(cj, pj))
            assert overlap <= 1e-8 * (mx.frob(cj) * mx.frob(pj) + 1e-30)
