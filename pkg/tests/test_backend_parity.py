"""Bit-identity of the compiled kernels against the pure-Python twins."""

import numpy as np
import pytest

from seqlora._kernels import pyref

ckern = pytest.importorskip(
    "seqlora._kernels.ckern", reason="compiled kernels not built"
)


def _rng():
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(2024)))


def test_mat_mul_bitwise():
    rng = _rng()
    for _ in range(25):
        ar, ac, bc = (int(x) for x in rng.integers(1, 10, size=3))
        a = rng.standard_normal(ar * ac)
        b = rng.standard_normal(ac * bc)
        o1 = np.empty(ar * bc)
        o2 = np.empty(ar * bc)
        pyref.mat_mul(ar, ac, bc, a, b, o1)
        ckern.mat_mul(ar, ac, bc, a, b, o2)
        assert o1.tobytes() == o2.tobytes()


def test_jacobi_eigh_bitwise():
    rng = _rng()
    for _ in range(15):
        n = int(rng.integers(1, 13))
        g = rng.standard_normal((n, n))
        s = np.ascontiguousarray((g + g.T) / 2.0).ravel()
        v1, w1 = np.empty(n), np.empty(n * n)
        v2, w2 = np.empty(n), np.empty(n * n)
        r1 = pyref.jacobi_eigh(n, s.copy(), v1, w1)
        r2 = ckern.jacobi_eigh(n, s.copy(), v2, w2)
        assert r1 == r2
        assert v1.tobytes() == v2.tobytes()
        assert w1.tobytes() == w2.tobytes()


def test_cholesky_bitwise():
    rng = _rng()
    for _ in range(15):
        n = int(rng.integers(1, 11))
        nrhs = int(rng.integers(1, 5))
        g = rng.standard_normal((n, n))
        spd = np.ascontiguousarray(g @ g.T + np.eye(n)).ravel()
        l1, l2 = np.empty(n * n), np.empty(n * n)
        assert pyref.cholesky_factor(n, spd, l1) == -1
        assert ckern.cholesky_factor(n, spd, l2) == -1
        assert l1.tobytes() == l2.tobytes()
        b = rng.standard_normal(n * nrhs)
        x1, x2 = np.empty(n * nrhs), np.empty(n * nrhs)
        pyref.cholesky_solve(n, nrhs, l1, b, x1)
        ckern.cholesky_solve(n, nrhs, l2, b, x2)
        assert x1.tobytes() == x2.tobytes()


def test_cholesky_failure_agrees():
    bad = np.diag([1.0, -2.0]).ravel().copy()
    l1, l2 = np.zeros(4), np.zeros(4)
    assert pyref.cholesky_factor(2, bad, l1) == ckern.cholesky_factor(2, bad, l2) == 1


def test_qr_and_power_iteration_bitwise():
    rng = _rng()
    for _ in range(15):
        m = int(rng.integers(1, 11))
        r = int(rng.integers(1, m + 1))
        g = rng.standard_normal(m * r)
        q1, q2 = np.empty(m * r), np.empty(m * r)
        assert pyref.qr_orthonormal(m, r, g, q1) == -1
        assert ckern.qr_orthonormal(m, r, g, q2) == -1
        assert q1.tobytes() == q2.tobytes()
        a = rng.standard_normal(m * r)
        s1 = pyref.power_iter_sigma(m, r, a, 150, 1e-13)
        s2 = ckern.power_iter_sigma(m, r, a, 150, 1e-13)
        assert np.float64(s1).tobytes() == np.float64(s2).tobytes()
