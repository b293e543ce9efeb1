"""Dense double-precision matrices and the small linear-algebra core.

Values are row-major float64 and treated as immutable once constructed;
they are safe to share across concurrent readers.  The loop-heavy work
(products, eigendecomposition, Cholesky, orthonormalization, power
iteration) is delegated to the kernel backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import NumericalError, NotPositiveDefiniteError, ShapeError


class Matrix:
    """Dense rows x cols matrix over a flat row-major float64 buffer."""

    __slots__ = ("rows", "cols", "data")

    def __init__(self, rows: int, cols: int, data):
        if rows <= 0 or cols <= 0:
            raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
        arr = np.ascontiguousarray(data, dtype=np.float64).ravel()
        if arr.size != rows * cols:
            raise ShapeError(
                f"data length {arr.size} does not match {rows}x{cols}={rows * cols}"
            )
        self.rows = rows
        self.cols = cols
        self.data = arr

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zeros(rows: int, cols: int) -> "Matrix":
        return Matrix(rows, cols, np.zeros(rows * cols))

    @staticmethod
    def identity(n: int) -> "Matrix":
        return Matrix(n, n, np.eye(n).ravel())

    @staticmethod
    def from_rows(rows_list) -> "Matrix":
        arr = np.asarray(rows_list, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("from_rows expects a 2-D nested sequence")
        return Matrix(arr.shape[0], arr.shape[1], arr.ravel())

    @staticmethod
    def diag(values) -> "Matrix":
        v = np.asarray(values, dtype=np.float64).ravel()
        return Matrix(v.size, v.size, np.diag(v).ravel())

    def copy(self) -> "Matrix":
        return Matrix(self.rows, self.cols, self.data.copy())

    # -- accessors ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def at(self, i: int, j: int) -> float:
        return float(self.data[i * self.cols + j])

    def to_numpy(self) -> np.ndarray:
        """2-D copy for interop (tests, serialization)."""
        return self.data.reshape(self.rows, self.cols).copy()

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


@dataclass(frozen=True)
class SymEig:
    """Eigenvalues (descending) and matching orthonormal eigenvector columns."""

    values: np.ndarray
    vectors: Matrix


def gaussian_matrix(rows: int, cols: int, rng, scale: float = 1.0) -> Matrix:
    """Matrix with independent N(0, scale^2) entries."""
    data = rng.standard_normal(rows * cols)
    if scale != 1.0:
        data = data * scale
    if not np.isfinite(data).all():
        raise NumericalError("generator produced non-finite entries")
    return Matrix(rows, cols, data)


# -- elementwise plumbing ---------------------------------------------------


def transpose(a: Matrix) -> Matrix:
    return Matrix(a.cols, a.rows, np.ascontiguousarray(a.data.reshape(a.rows, a.cols).T).ravel())


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return Matrix(a.rows, a.cols, a.data + b.data)


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return Matrix(a.rows, a.cols, a.data - b.data)


def scale(a: Matrix, c: float) -> Matrix:
    return Matrix(a.rows, a.cols, a.data * float(c))


def frob(a: Matrix) -> float:
    return math.sqrt(float(np.sum(a.data * a.data)))


def trace(a: Matrix) -> float:
    if a.rows != a.cols:
        raise ShapeError(f"trace needs a square matrix, got {a.shape}")
    return float(np.sum(a.data.reshape(a.rows, a.cols).diagonal()))


def inner(a: Matrix, b: Matrix) -> float:
    """Frobenius inner product <A, B>."""
    if a.shape != b.shape:
        raise ShapeError(f"inner shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a.data * b.data))


def max_abs(a: Matrix) -> float:
    return float(np.max(np.abs(a.data))) if a.data.size else 0.0


# -- kernel-backed operations ------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.empty(a.rows * b.cols)
    K.mat_mul(a.rows, a.cols, b.cols, a.data, b.data, out)
    return Matrix(a.rows, b.cols, out)


def sym_eig(m: Matrix) -> SymEig:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    The input may carry a round-off-level symmetry defect (at most
    1e-10 relative in Frobenius norm); it is symmetrized before the sweeps.
    """
    if m.rows != m.cols:
        raise ShapeError(f"sym_eig needs a square matrix, got {m.shape}")
    n = m.rows
    a2 = m.data.reshape(n, n)
    defect = math.sqrt(float(np.sum((a2 - a2.T) ** 2)))
    if defect > 1e-10 * frob(m):
        raise ShapeError(
            f"input is not symmetric: defect {defect:.3e} exceeds 1e-10 relative"
        )
    sym = np.ascontiguousarray((a2 + a2.T) / 2.0).ravel()
    vals = np.empty(n)
    vecs = np.empty(n * n)
    sweeps = K.jacobi_eigh(n, sym, vals, vecs)
    if sweeps < 0:
        raise NumericalError("Jacobi eigendecomposition did not converge")
    return SymEig(values=vals, vectors=Matrix(n, n, vecs))


def spd_solve(m: Matrix, rhs: Matrix) -> Matrix:
    """Solve M X = RHS for symmetric positive definite M via Cholesky."""
    if m.rows != m.cols:
        raise ShapeError(f"spd_solve needs a square matrix, got {m.shape}")
    if rhs.rows != m.rows:
        raise ShapeError(f"spd_solve rhs rows {rhs.rows} != {m.rows}")
    n = m.rows
    l = np.empty(n * n)
    pivot = K.cholesky_factor(n, m.data, l)
    if pivot >= 0:
        raise NotPositiveDefiniteError(
            f"non-positive pivot at index {pivot}: Gram matrix is degenerate, "
            "regularize before solving"
        )
    out = np.empty(n * rhs.cols)
    K.cholesky_solve(n, rhs.cols, l, rhs.data, out)
    return Matrix(n, rhs.cols, out)


def spectral_norm(m: Matrix, iters: int = 200, tol: float = 1e-13) -> float:
    """Largest singular value estimated by power iteration on M^T M."""
    if iters <= 0:
        raise ValueError("iters must be positive")
    return float(K.power_iter_sigma(m.rows, m.cols, m.data, iters, tol))


def sqrt_spd(m: Matrix) -> Matrix:
    """Symmetric square root of a symmetric PSD matrix.

    Eigenvalues in [-1e-12 * ||M||_2, 0) are clamped to zero (round-off
    from covariances built from data); anything more negative is an error.
    """
    eig = sym_eig(m)
    lam_max = float(np.max(np.abs(eig.values))) if eig.values.size else 0.0
    floor = -1e-12 * lam_max
    clamped = np.empty_like(eig.values)
    for q, lam in enumerate(eig.values):
        if lam < floor:
            raise NumericalError(
                f"matrix is not PSD: eigenvalue {lam:.6e} below clamp floor {floor:.6e}"
            )
        clamped[q] = math.sqrt(lam) if lam > 0.0 else 0.0
    v = eig.vectors
    scaled = Matrix(v.rows, v.cols, (v.data.reshape(v.rows, v.cols) * clamped).ravel())
    return matmul(scaled, transpose(v))


def haar_frame(m: int, r: int, rng) -> Matrix:
    """m x r frame with orthonormal columns, Haar-distributed.

    QR of a standard Gaussian matrix; the Gram-Schmidt normalization keeps
    the implicit R diagonal positive, which fixes the sign ambiguity and
    makes the column span uniform over the Grassmannian.
    """
    if r > m:
        raise ShapeError(f"frame needs r <= m, got r={r} > m={m}")
    g = gaussian_matrix(m, r, rng)
    out = np.empty(m * r)
    bad = K.qr_orthonormal(m, r, g.data, out)
    if bad >= 0:
        raise NumericalError(f"rank collapse at column {bad} during orthonormalization")
    return Matrix(m, r, out)


def orthonormalize(a: Matrix) -> Matrix:
    """Orthonormalize the columns of a full-column-rank matrix."""
    out = np.empty(a.rows * a.cols)
    bad = K.qr_orthonormal(a.rows, a.cols, a.data, out)
    if bad >= 0:
        raise NumericalError(f"rank collapse at column {bad} during orthonormalization")
    return Matrix(a.rows, a.cols, out)
