"""Pure-Python reference kernels.

Each function here has a compiled twin in ``ckern.pyx`` that executes the
same floating-point operations in the same order, so the two backends
produce bit-identical results.  Inputs and outputs are flat row-major
float64 numpy buffers; this module converts them to Python lists at entry
for speed and writes results back at exit.
"""

from __future__ import annotations

import math

BACKEND_NAME = "pure"


def mat_mul(ar, ac, bc, a, b, out):
    """out (ar x bc) = a (ar x ac) @ b (ac x bc)."""
    al = a.tolist()
    bl = b.tolist()
    res = [0.0] * (ar * bc)
    for i in range(ar):
        ia = i * ac
        io = i * bc
        for j in range(bc):
            acc = 0.0
            for k in range(ac):
                acc += al[ia + k] * bl[k * bc + j]
            res[io + j] = acc
    out[:] = res


def jacobi_eigh(n, a, out_vals, out_vecs, max_sweeps=64, tol=1e-14):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    ``a`` is destroyed.  Eigenvalues land in ``out_vals`` sorted descending,
    matching eigenvector columns in ``out_vecs``.  Returns the number of
    sweeps used, or -1 if the off-diagonal mass failed to fall below
    ``tol * ||A||_F`` within ``max_sweeps``.
    """
    m = a.tolist()
    v = [0.0] * (n * n)
    for i in range(n):
        v[i * n + i] = 1.0

    norm2 = 0.0
    for i in range(n * n):
        norm2 += m[i] * m[i]
    thresh2 = tol * tol * norm2

    converged = -1
    for sweep in range(max_sweeps):
        off2 = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off2 += 2.0 * m[p * n + q] * m[p * n + q]
        if off2 <= thresh2:
            converged = sweep
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p * n + q]
                if apq == 0.0:
                    continue
                app = m[p * n + p]
                aqq = m[q * n + q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # Rotate the 2x2 pivot block analytically.
                m[p * n + p] = app - t * apq
                m[q * n + q] = aqq + t * apq
                m[p * n + q] = 0.0
                m[q * n + p] = 0.0
                for k in range(n):
                    if k == p or k == q:
                        continue
                    akp = m[k * n + p]
                    akq = m[k * n + q]
                    m[k * n + p] = c * akp - s * akq
                    m[k * n + q] = s * akp + c * akq
                    m[p * n + k] = m[k * n + p]
                    m[q * n + k] = m[k * n + q]
                for k in range(n):
                    vkp = v[k * n + p]
                    vkq = v[k * n + q]
                    v[k * n + p] = c * vkp - s * vkq
                    v[k * n + q] = s * vkp + c * vkq

    vals = [m[i * n + i] for i in range(n)]
    # Selection sort, descending, earlier index wins ties: deterministic and
    # identical to the compiled twin.
    order = list(range(n))
    for i in range(n):
        best = i
        for j in range(i + 1, n):
            if vals[order[j]] > vals[order[best]]:
                best = j
        order[i], order[best] = order[best], order[i]

    sorted_vecs = [0.0] * (n * n)
    for jnew, jold in enumerate(order):
        out_vals[jnew] = vals[jold]
        for i in range(n):
            sorted_vecs[i * n + jnew] = v[i * n + jold]
    out_vecs[:] = sorted_vecs
    return converged


def cholesky_factor(n, a, out_l):
    """Lower Cholesky factor of a symmetric matrix.

    Returns -1 on success, else the index of the first non-positive pivot.
    """
    m = a.tolist()
    l = [0.0] * (n * n)
    for j in range(n):
        s = m[j * n + j]
        for k in range(j):
            s -= l[j * n + k] * l[j * n + k]
        if s <= 0.0:
            return j
        d = math.sqrt(s)
        l[j * n + j] = d
        for i in range(j + 1, n):
            t = m[i * n + j]
            for k in range(j):
                t -= l[i * n + k] * l[j * n + k]
            l[i * n + j] = t / d
    out_l[:] = l
    return -1


def cholesky_solve(n, nrhs, l, b, out):
    """Solve (L L^T) X = B given the lower factor L."""
    ll = l.tolist()
    x = b.tolist()
    for j in range(nrhs):
        for i in range(n):
            t = x[i * nrhs + j]
            for k in range(i):
                t -= ll[i * n + k] * x[k * nrhs + j]
            x[i * nrhs + j] = t / ll[i * n + i]
        for i in range(n - 1, -1, -1):
            t = x[i * nrhs + j]
            for k in range(i + 1, n):
                t -= ll[k * n + i] * x[k * nrhs + j]
            x[i * nrhs + j] = t / ll[i * n + i]
    out[:] = x


def qr_orthonormal(rows, cols, a, out_q):
    """Orthonormalize columns by modified Gram-Schmidt with one
    re-orthogonalization pass.  Diagonal of the implicit R is positive, so
    applying this to a standard Gaussian matrix samples the Haar measure.

    Returns -1 on success, else the index of a column whose residual norm
    collapsed to zero (rank deficiency).
    """
    q = a.tolist()
    for j in range(cols):
        for _ in range(2):
            for i in range(j):
                r = 0.0
                for k in range(rows):
                    r += q[k * cols + i] * q[k * cols + j]
                for k in range(rows):
                    q[k * cols + j] -= r * q[k * cols + i]
        nrm2 = 0.0
        for k in range(rows):
            nrm2 += q[k * cols + j] * q[k * cols + j]
        if nrm2 == 0.0:
            return j
        inv = 1.0 / math.sqrt(nrm2)
        for k in range(rows):
            q[k * cols + j] *= inv
    out_q[:] = q
    return -1


def power_iter_sigma(rows, cols, a, iters, tol):
    """Largest singular value by power iteration on A^T A.

    Deterministic harmonic-ramp start; falls back to canonical basis
    vectors if the start vector happens to lie in the null space.  The
    Rayleigh estimate is monotone nondecreasing across iterations.
    """
    m = a.tolist()

    def apply_a(vec):
        w = [0.0] * rows
        for i in range(rows):
            acc = 0.0
            ia = i * cols
            for k in range(cols):
                acc += m[ia + k] * vec[k]
            w[i] = acc
        return w

    def apply_at(w):
        u = [0.0] * cols
        for k in range(cols):
            acc = 0.0
            for i in range(rows):
                acc += m[i * cols + k] * w[i]
            u[k] = acc
        return u

    v = [1.0 / (i + 1.0) for i in range(cols)]
    nrm2 = 0.0
    for k in range(cols):
        nrm2 += v[k] * v[k]
    inv = 1.0 / math.sqrt(nrm2)
    for k in range(cols):
        v[k] *= inv

    w = apply_a(v)
    wn2 = 0.0
    for i in range(rows):
        wn2 += w[i] * w[i]
    if wn2 == 0.0:
        for j in range(cols):
            v = [0.0] * cols
            v[j] = 1.0
            w = apply_a(v)
            wn2 = 0.0
            for i in range(rows):
                wn2 += w[i] * w[i]
            if wn2 > 0.0:
                break
        if wn2 == 0.0:
            return 0.0

    sigma = math.sqrt(wn2)
    for _ in range(iters):
        u = apply_at(w)
        un2 = 0.0
        for k in range(cols):
            un2 += u[k] * u[k]
        if un2 == 0.0:
            break
        inv = 1.0 / math.sqrt(un2)
        for k in range(cols):
            u[k] *= inv
        w = apply_a(u)
        wn2 = 0.0
        for i in range(rows):
            wn2 += w[i] * w[i]
        sigma_new = math.sqrt(wn2)
        if abs(sigma_new - sigma) <= tol * sigma_new:
            return sigma_new
        sigma = sigma_new
    return sigma
