import dataclasses
import math

import numpy as np
import pytest

from seqlora import matrix as mx
from seqlora import tasks as tk
from seqlora.errors import ShapeError
from seqlora.matrix import Matrix
from seqlora.rng import make_rng


class TestSpectrumSpec:
    def test_profiles(self):
        assert np.array_equal(tk.SpectrumSpec.flat(3, 2.0).eigenvalues, [2.0, 2.0, 2.0])
        geo = tk.SpectrumSpec.geometric(4, 0.5).eigenvalues
        assert np.allclose(geo, [1.0, 0.5, 0.25, 0.125])
        spk = tk.SpectrumSpec.spiked(4, 1, 10.0).eigenvalues
        assert np.array_equal(spk, [10.0, 1.0, 1.0, 1.0])

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            tk.SpectrumSpec(2, np.array([1.0, -0.1]))

    def test_covariance_has_requested_spectrum(self):
        spec = tk.SpectrumSpec.geometric(5, 0.7)
        cov = tk.covariance_from_spectrum(spec, make_rng(0))
        got = np.sort(np.linalg.eigvalsh(cov.to_numpy()))[::-1]
        assert np.abs(got - spec.eigenvalues).max() <= 1e-12

    def test_rotation_seed_pins_covariance(self):
        spec = tk.SpectrumSpec.flat(4, 1.0, rotation_seed=9)
        c1 = tk.covariance_from_spectrum(spec, make_rng(1))
        c2 = tk.covariance_from_spectrum(spec, make_rng(2))
        assert c1.data.tobytes() == c2.data.tobytes()


class TestLinearTask:
    def test_loss_at_target_is_noise_floor(self):
        task = tk.make_linear_task(6, 4, tk.SpectrumSpec.flat(6), 0.3, make_rng(3))
        assert abs(tk.population_loss(task, task.targets[0]) - 0.3**2 * 4) <= 1e-12

    def test_quadratic_expansion(self):
        rng = make_rng(4)
        task = tk.make_linear_task(5, 3, tk.SpectrumSpec.geometric(5, 0.8), 0.1, rng)
        wstar = task.targets[0]
        for _ in range(5):
            delta = mx.gaussian_matrix(3, 5, rng)
            excess = tk.population_loss(task, mx.add(wstar, delta)) - tk.population_loss(
                task, wstar
            )
            want = mx.trace(mx.matmul(mx.matmul(delta, task.sigma), mx.transpose(delta)))
            assert abs(excess - want) <= 1e-10 * abs(want)

    def test_population_grad_matches_finite_differences(self):
        rng = make_rng(5)
        task = tk.make_linear_task(4, 3, tk.SpectrumSpec.flat(4), 0.05, rng)
        w = mx.gaussian_matrix(3, 4, rng)
        g = tk.population_grad(task, w).to_numpy()
        h = 1e-5
        fd = np.zeros_like(g)
        for i in range(3):
            for j in range(4):
                up = w.to_numpy()
                up[i, j] += h
                dn = w.to_numpy()
                dn[i, j] -= h
                fd[i, j] = (
                    tk.population_loss(task, Matrix(3, 4, up.ravel()))
                    - tk.population_loss(task, Matrix(3, 4, dn.ravel()))
                ) / (2 * h)
        assert np.abs(g - fd).max() <= 1e-6 * max(np.abs(fd).max(), 1.0)

    def test_second_differences_constant(self):
        # Exact quadraticity of the population loss along any direction.
        rng = make_rng(6)
        task = tk.make_linear_task(4, 4, tk.SpectrumSpec.flat(4), 0.0, rng)
        w = mx.gaussian_matrix(4, 4, rng)
        d = mx.gaussian_matrix(4, 4, rng)

        def at(t):
            return tk.population_loss(task, mx.add(w, mx.scale(d, t)))

        second = [at(t + 0.1) - 2 * at(t) + at(t - 0.1) for t in (0.0, 0.7, -1.3, 2.9)]
        for s in second[1:]:
            assert abs(s - second[0]) <= 1e-9 * abs(second[0])


class TestSampleBatch:
    def test_zero_target_zero_noise(self):
        task = tk.make_linear_task(
            4, 3, tk.SpectrumSpec.flat(4), 0.0, make_rng(7), target=Matrix.zeros(3, 4)
        )
        _, y = tk.sample_batch(task, 10, make_rng(8))
        assert np.array_equal(y.to_numpy(), np.zeros((3, 10)))

    def test_empirical_second_moment_converges(self):
        task = tk.make_linear_task(6, 2, tk.SpectrumSpec.geometric(6, 0.6), 0.0, make_rng(9))
        p = 100_000
        x, _ = tk.sample_batch(task, p, make_rng(10))
        xn = x.to_numpy()
        emp = (xn @ xn.T) / p
        err = np.sqrt(((emp - task.sigma.to_numpy()) ** 2).sum())
        assert err <= 5.0 * mx.frob(task.sigma) / math.sqrt(p)

    def test_fixed_seed_reproducible(self):
        task = tk.make_linear_task(5, 4, tk.SpectrumSpec.flat(5), 0.2, make_rng(11))
        x1, y1 = tk.sample_batch(task, 7, make_rng(12))
        x2, y2 = tk.sample_batch(task, 7, make_rng(12))
        assert x1.data.tobytes() == x2.data.tobytes()
        assert y1.data.tobytes() == y2.data.tobytes()

    def test_sampled_loss_converges_to_population(self):
        spec = tk.SpectrumSpec.geometric(6, 0.7, rotation_seed=21)
        pop = tk.make_linear_task(6, 4, spec, 0.0, make_rng(13))
        p = 40_000
        smp = tk.make_linear_task(
            6, 4, spec, 0.0, make_rng(14), kind=tk.LINEAR_SAMPLED, p=p,
            target=pop.targets[0],
        )
        w = mx.gaussian_matrix(4, 6, make_rng(15))
        pop_loss = tk.population_loss(pop, w)
        out = mx.matmul(w, smp.x_train)
        emp_loss = tk.batch_mse(out, smp.y_train)
        assert abs(emp_loss - pop_loss) / pop_loss <= 5.0 / math.sqrt(p)


class TestDeepTask:
    def test_identity_two_layers_collapse_to_product(self):
        rng = make_rng(16)
        task = tk.make_deep_task([5, 4, 3], "identity", tk.SpectrumSpec.flat(5), 0.0, rng)
        w_prod = mx.matmul(task.targets[1], task.targets[0])
        out_net = tk.teacher_forward(task, task.x_train)[-1]
        out_flat = mx.matmul(w_prod, task.x_train)
        assert np.abs(out_net.to_numpy() - out_flat.to_numpy()).max() <= 1e-10
        loss_net = tk.batch_mse(out_net, task.y_train)
        loss_flat = tk.batch_mse(out_flat, task.y_train)
        assert abs(loss_net - loss_flat) <= 1e-10 * (1.0 + loss_flat)

    def test_tanh_layer_is_nonexpansive(self):
        rng = make_rng(17)
        task = tk.make_deep_task([4, 4, 2], "tanh", tk.SpectrumSpec.flat(4), 0.0, rng)
        for _ in range(20):
            a = mx.gaussian_matrix(4, 6, rng)
            b = mx.gaussian_matrix(4, 6, rng)
            num = mx.frob(mx.sub(tk._activate(task, a), tk._activate(task, b)))
            den = mx.frob(mx.sub(a, b))
            assert num / den <= 1.0 + 1e-9

    def test_student_equals_teacher_hits_noise_floor(self):
        rng = make_rng(18)
        task = tk.make_deep_task([4, 5, 3], "tanh", tk.SpectrumSpec.flat(4), 0.05, rng)
        out = tk.forward_layers(task, list(task.targets), task.x_train)[-1]
        loss = tk.batch_mse(out, task.y_train)
        noise = mx.sub(task.y_train, out)
        floor = float(np.sum(noise.data * noise.data)) / task.p
        assert abs(loss - floor) <= 1e-12

    def test_needs_two_layers(self):
        with pytest.raises(ShapeError):
            tk.make_deep_task([4, 3], "identity", tk.SpectrumSpec.flat(4), 0.0, make_rng(19))

    def test_records_lipschitz_metadata(self):
        task = tk.make_deep_task([4, 4, 4], "tanh", tk.SpectrumSpec.flat(4), 0.01, make_rng(20))
        assert task.gammas == (1.0, 1.0)
        assert task.l_out is not None and task.l_out > 0


class TestStream:
    def test_deterministic(self):
        spec = tk.SpectrumSpec.flat(6)
        s1 = tk.make_linear_stream(3, 6, 4, spec, 0.01, make_rng(22))
        s2 = tk.make_linear_stream(3, 6, 4, spec, 0.01, make_rng(22))
        for t1, t2 in zip(s1, s2):
            assert t1.targets[0].data.tobytes() == t2.targets[0].data.tobytes()
            assert t1.sigma.data.tobytes() == t2.sigma.data.tobytes()

    def test_mixing_correlates_targets(self):
        spec = tk.SpectrumSpec.flat(16)
        indep = tk.make_linear_stream(2, 16, 16, spec, 0.0, make_rng(23), mixing=0.0)
        mixed = tk.make_linear_stream(2, 16, 16, spec, 0.0, make_rng(23), mixing=0.95)

        def corr(stream):
            a = stream[0].targets[0].data
            b = stream[1].targets[0].data
            return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

        assert abs(corr(indep)) < 0.3
        assert corr(mixed) > 0.7

    def test_duplicated_task_fields_replaceable(self):
        # dataclasses.replace supports building sampled variants in tests.
        task = tk.make_linear_task(
            3, 2, tk.SpectrumSpec.flat(3), 0.0, make_rng(24), kind=tk.LINEAR_SAMPLED, p=4
        )
        twin = dataclasses.replace(task, noise_std=1.0)
        assert twin.noise_std == 1.0 and twin.x_train is task.x_train
