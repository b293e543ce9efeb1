# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; bit-identical twin of ``pyref``.

Every loop mirrors the pure-Python reference operation for operation, so
the two backends agree exactly (the extension is built with
``-ffp-contract=off`` to keep multiply-add rounding identical).
"""

from libc.math cimport sqrt, fabs
from libc.stdlib cimport free, malloc

BACKEND_NAME = "compiled"


def mat_mul(int ar, int ac, int bc, double[::1] a, double[::1] b,
            double[::1] out):
    cdef int i, j, k, ia, io
    cdef double acc
    with nogil:
        for i in range(ar):
            ia = i * ac
            io = i * bc
            for j in range(bc):
                acc = 0.0
                for k in range(ac):
                    acc += a[ia + k] * b[k * bc + j]
                out[io + j] = acc


def jacobi_eigh(int n, double[::1] a, double[::1] out_vals,
                double[::1] out_vecs, int max_sweeps=64, double tol=1e-14):
    cdef double *m = <double *> malloc(n * n * sizeof(double))
    cdef double *v = <double *> malloc(n * n * sizeof(double))
    cdef double *vals = <double *> malloc(n * sizeof(double))
    cdef int *order = <int *> malloc(n * sizeof(int))
    if m == NULL or v == NULL or vals == NULL or order == NULL:
        free(m); free(v); free(vals); free(order)
        raise MemoryError()

    cdef int i, j, k, p, q, sweep, converged, best, tmp, jnew
    cdef double norm2, thresh2, off2, apq, app, aqq, theta, t, c, s
    cdef double akp, akq, vkp, vkq

    try:
        with nogil:
            for i in range(n * n):
                m[i] = a[i]
                v[i] = 0.0
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
                            t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                        else:
                            t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                        c = 1.0 / sqrt(t * t + 1.0)
                        s = t * c
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

            for i in range(n):
                vals[i] = m[i * n + i]
                order[i] = i
            for i in range(n):
                best = i
                for j in range(i + 1, n):
                    if vals[order[j]] > vals[order[best]]:
                        best = j
                tmp = order[i]
                order[i] = order[best]
                order[best] = tmp

            for jnew in range(n):
                out_vals[jnew] = vals[order[jnew]]
                for i in range(n):
                    out_vecs[i * n + jnew] = v[i * n + order[jnew]]
    finally:
        free(m); free(v); free(vals); free(order)
    return converged


def cholesky_factor(int n, double[::1] a, double[::1] out_l):
    cdef int i, j, k, fail
    cdef double s, d, t
    cdef double *l = <double *> malloc(n * n * sizeof(double))
    if l == NULL:
        raise MemoryError()
    fail = -1
    try:
        with nogil:
            for i in range(n * n):
                l[i] = 0.0
            for j in range(n):
                s = a[j * n + j]
                for k in range(j):
                    s -= l[j * n + k] * l[j * n + k]
                if s <= 0.0:
                    fail = j
                    break
                d = sqrt(s)
                l[j * n + j] = d
                for i in range(j + 1, n):
                    t = a[i * n + j]
                    for k in range(j):
                        t -= l[i * n + k] * l[j * n + k]
                    l[i * n + j] = t / d
            if fail < 0:
                for i in range(n * n):
                    out_l[i] = l[i]
    finally:
        free(l)
    return fail


def cholesky_solve(int n, int nrhs, double[::1] l, double[::1] b,
                   double[::1] out):
    cdef int i, j, k
    cdef double t
    with nogil:
        for i in range(n * nrhs):
            out[i] = b[i]
        for j in range(nrhs):
            for i in range(n):
                t = out[i * nrhs + j]
                for k in range(i):
                    t -= l[i * n + k] * out[k * nrhs + j]
                out[i * nrhs + j] = t / l[i * n + i]
            for i in range(n - 1, -1, -1):
                t = out[i * nrhs + j]
                for k in range(i + 1, n):
                    t -= l[k * n + i] * out[k * nrhs + j]
                out[i * nrhs + j] = t / l[i * n + i]


def qr_orthonormal(int rows, int cols, double[::1] a, double[::1] out_q):
    cdef int i, j, k, rep, fail
    cdef double r, nrm2, inv
    cdef double *q = <double *> malloc(rows * cols * sizeof(double))
    if q == NULL:
        raise MemoryError()
    fail = -1
    try:
        with nogil:
            for i in range(rows * cols):
                q[i] = a[i]
            for j in range(cols):
                for rep in range(2):
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
                    fail = j
                    break
                inv = 1.0 / sqrt(nrm2)
                for k in range(rows):
                    q[k * cols + j] *= inv
            if fail < 0:
                for i in range(rows * cols):
                    out_q[i] = q[i]
    finally:
        free(q)
    return fail


def power_iter_sigma(int rows, int cols, double[::1] a, int iters,
                     double tol):
    cdef int i, j, k, it, found
    cdef double acc, nrm2, inv, wn2, un2, sigma, sigma_new
    cdef double *v = <double *> malloc(cols * sizeof(double))
    cdef double *w = <double *> malloc(rows * sizeof(double))
    cdef double *u = <double *> malloc(cols * sizeof(double))
    if v == NULL or w == NULL or u == NULL:
        free(v); free(w); free(u)
        raise MemoryError()
    try:
        with nogil:
            for k in range(cols):
                v[k] = 1.0 / (k + 1.0)
            nrm2 = 0.0
            for k in range(cols):
                nrm2 += v[k] * v[k]
            inv = 1.0 / sqrt(nrm2)
            for k in range(cols):
                v[k] *= inv

            wn2 = 0.0
            for i in range(rows):
                acc = 0.0
                for k in range(cols):
                    acc += a[i * cols + k] * v[k]
                w[i] = acc
                wn2 += acc * acc
            if wn2 == 0.0:
                found = 0
                for j in range(cols):
                    for k in range(cols):
                        v[k] = 0.0
                    v[j] = 1.0
                    wn2 = 0.0
                    for i in range(rows):
                        acc = 0.0
                        for k in range(cols):
                            acc += a[i * cols + k] * v[k]
                        w[i] = acc
                        wn2 += acc * acc
                    if wn2 > 0.0:
                        found = 1
                        break
                if found == 0:
                    sigma = 0.0
                    iters = 0

            if wn2 > 0.0:
                sigma = sqrt(wn2)
                for it in range(iters):
                    un2 = 0.0
                    for k in range(cols):
                        acc = 0.0
                        for i in range(rows):
                            acc += a[i * cols + k] * w[i]
                        u[k] = acc
                        un2 += acc * acc
                    if un2 == 0.0:
                        break
                    inv = 1.0 / sqrt(un2)
                    for k in range(cols):
                        u[k] *= inv
                    wn2 = 0.0
                    for i in range(rows):
                        acc = 0.0
                        for k in range(cols):
                            acc += a[i * cols + k] * u[k]
                        w[i] = acc
                        wn2 += acc * acc
                    sigma_new = sqrt(wn2)
                    if fabs(sigma_new - sigma) <= tol * sigma_new:
                        sigma = sigma_new
                        break
                    sigma = sigma_new
    finally:
        free(v); free(w); free(u)
    return sigma
