"""Low-rank factor pairs, the per-layer frozen-basis memory, regularized
projection, composed-weight assembly, and crosstalk operators.

A registry is single-writer while its concept is being learned and becomes
immutable once frozen; frozen registries and composed models are safe for
unlimited concurrent readers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import matrix as mx
from .errors import (
    CapacityError,
    NotPositiveDefiniteError,
    OrthogonalityError,
    ShapeError,
)
from .matrix import Matrix

APPEND_DEFECT_TOL = 1e-6

FACTOR_MAGIC = b"SQL1"


@dataclass(frozen=True)
class LoRAFactorPair:
    """One concept's factors at one layer: the update is a @ b^T."""

    layer: int
    a: Matrix  # n x r
    b: Matrix  # m x r

    def __post_init__(self):
        if self.a.cols != self.b.cols:
            raise ShapeError(
                f"factor rank mismatch: a has {self.a.cols} columns, b has {self.b.cols}"
            )
        if self.rank < 1:
            raise ShapeError("factor rank must be at least 1")
        if self.rank > min(self.a.rows, self.b.rows):
            raise ShapeError(
                f"rank {self.rank} exceeds min(n={self.a.rows}, m={self.b.rows})"
            )

    @property
    def rank(self) -> int:
        return self.a.cols

    def residual(self) -> Matrix:
        """The weight update a @ b^T (n x m)."""
        return mx.matmul(self.a, mx.transpose(self.b))


class BasisRegistry:
    """Ordered frozen bases for one layer plus the regularized projector
    onto their orthogonal complement."""

    def __init__(self, m: int, epsilon: float = 1e-8, layer: int = 0):
        if m < 1:
            raise ShapeError("feature dimension must be positive")
        if epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        self.layer = layer
        self.m = m
        self.epsilon = float(epsilon)
        self.bases: list[Matrix] = []
        self._projector: Matrix | None = None
        self._ortho: Matrix | None = None  # orthonormal cache of col(B_int)

    def __len__(self) -> int:
        return len(self.bases)

    @property
    def total_rank(self) -> int:
        return sum(b.cols for b in self.bases)

    @property
    def free_dim(self) -> int:
        return self.m - self.total_rank

    def _ortho_cache(self) -> Matrix | None:
        """Orthonormal basis of the span of stored bases, for defect
        measurement only; stored bases themselves stay exactly as learned."""
        if not self.bases:
            return None
        if self._ortho is None:
            self._ortho = mx.orthonormalize(self.stacked())
        return self._ortho

    def stacked(self) -> Matrix:
        """Column-wise concatenation of all stored bases (m x sum r_j)."""
        if not self.bases:
            raise ShapeError("registry is empty")
        cols = [b.data.reshape(self.m, b.cols) for b in self.bases]
        return Matrix(self.m, self.total_rank, np.hstack(cols).ravel())

    def defect(self, b: Matrix) -> float:
        """Relative overlap of b with the stored span (0 when empty)."""
        u = self._ortho_cache()
        if u is None:
            return 0.0
        nrm = mx.frob(b)
        if nrm == 0.0:
            return 0.0
        return mx.frob(mx.matmul(mx.transpose(u), b)) / nrm

    def append_basis(self, b: Matrix) -> "BasisRegistry":
        """Freeze a new basis.  The caller must have projected it first."""
        if b.rows != self.m:
            raise ShapeError(f"basis has {b.rows} rows, registry expects {self.m}")
        if self.total_rank + b.cols > self.m:
            raise CapacityError(
                f"cannot store rank {b.cols} on top of rank {self.total_rank}: "
                f"capacity is m={self.m} "
                f"(at rank {b.cols} that is at most {self.m // b.cols} concepts)"
            )
        d = self.defect(b)
        # The regularized projection itself leaves an O(epsilon) overlap, so
        # the gate widens with epsilon; at the default 1e-8 it sits at 1e-6.
        gate = max(APPEND_DEFECT_TOL, 10.0 * self.epsilon)
        if d > gate:
            raise OrthogonalityError(
                f"orthogonality defect {d:.3e} exceeds {gate:.0e}; "
                "project the basis before freezing"
            )
        self.bases.append(b)
        self._projector = None
        self._ortho = None
        return self

    def build_projector(self) -> Matrix:
        """P = I - B_int (B_int^T B_int + eps I)^-1 B_int^T, cached.

        The identity for an empty registry.  Exactly idempotent (to
        round-off) when epsilon is zero.
        """
        if self._projector is not None:
            return self._projector
        if not self.bases:
            self._projector = Matrix.identity(self.m)
            return self._projector
        bint = self.stacked()
        k = bint.cols
        gram = mx.matmul(mx.transpose(bint), bint)
        if self.epsilon > 0.0:
            gram = mx.add(gram, mx.scale(Matrix.identity(k), self.epsilon))
        try:
            x = mx.spd_solve(gram, mx.transpose(bint))
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(
                "stacked basis Gram matrix is rank deficient with epsilon = 0; "
                "rerun with a nonzero projector regularization"
            ) from exc
        p = mx.sub(Matrix.identity(self.m), mx.matmul(bint, x))
        pn = p.to_numpy()
        self._projector = Matrix(self.m, self.m, ((pn + pn.T) / 2.0).ravel())
        return self._projector

    def project(self, b_tilde: Matrix) -> Matrix:
        """Nearest matrix to b_tilde (Frobenius) orthogonal to the stored
        span, via the cached projector.

        With epsilon > 0 the regularized operator is applied twice: one
        application leaves an O(epsilon / lambda_min(Gram)) constraint
        residual, which learned small-norm bases can push above tolerance;
        squaring drives it to O(epsilon^2) while the Gram solve stays
        protected.  At epsilon = 0 the projector is idempotent and a single
        application is exact.
        """
        if b_tilde.rows != self.m:
            raise ShapeError(
                f"cannot project {b_tilde.rows}-row matrix in an m={self.m} registry"
            )
        if not self.bases:
            return b_tilde.copy()
        p = self.build_projector()
        out = mx.matmul(p, b_tilde)
        if self.epsilon > 0.0:
            out = mx.matmul(p, out)
        return out


class ComposedModel:
    """Per-layer base weights plus the ordered concept factor pairs."""

    def __init__(self, w0: list[Matrix]):
        if not w0:
            raise ShapeError("model needs at least one layer")
        self.w0 = list(w0)
        self.concepts: list[list[LoRAFactorPair]] = []

    @property
    def num_layers(self) -> int:
        return len(self.w0)

    @property
    def num_concepts(self) -> int:
        return len(self.concepts)

    def append_concept(self, pairs: list[LoRAFactorPair]) -> None:
        if len(pairs) != self.num_layers:
            raise ShapeError(
                f"expected {self.num_layers} factor pairs, got {len(pairs)}"
            )
        for ell, pair in enumerate(pairs):
            w = self.w0[ell]
            if pair.a.rows != w.rows or pair.b.rows != w.cols:
                raise ShapeError(
                    f"layer {ell}: factors ({pair.a.rows}, {pair.b.rows}) do not "
                    f"match weight {w.shape}"
                )
        self.concepts.append(list(pairs))

    def compose_weight(self, layer: int, upto: int | None = None) -> Matrix:
        """W0 + sum of the first ``upto`` concept residuals at ``layer``."""
        if upto is None:
            upto = self.num_concepts
        if not 0 <= upto <= self.num_concepts:
            raise IndexError(f"upto={upto} outside [0, {self.num_concepts}]")
        w = self.w0[layer].copy()
        for j in range(upto):
            w = mx.add(w, self.concepts[j][layer].residual())
        return w

    def crosstalk_operator(self, j: int, layer: int) -> Matrix:
        """C_j = sum of residuals of concepts after j at ``layer``.

        Zero for the last concept (empty sum).  Concept indices are 0-based.
        """
        if not 0 <= j < self.num_concepts:
            raise IndexError(f"concept index {j} outside [0, {self.num_concepts})")
        w = self.w0[layer]
        c = Matrix.zeros(w.rows, w.cols)
        for k in range(j + 1, self.num_concepts):
            c = mx.add(c, self.concepts[k][layer].residual())
        return c


def basis_projector(b: Matrix) -> Matrix:
    """Exact projector onto col(b): b (b^T b)^-1 b^T."""
    gram = mx.matmul(mx.transpose(b), b)
    x = mx.spd_solve(gram, mx.transpose(b))
    return mx.matmul(b, x)


def basis_complement_projector(b: Matrix) -> Matrix:
    """Projector onto the orthogonal complement of col(b)."""
    return mx.sub(Matrix.identity(b.rows), basis_projector(b))


# -- factor persistence -------------------------------------------------------
#
# One file per (concept, layer), little-endian:
#   magic "SQL1" | uint64 n | uint64 m | uint64 r | A (n*r f64, row-major)
#   | B (m*r f64, row-major)

def write_factor_file(path, pair: LoRAFactorPair) -> None:
    n, r = pair.a.rows, pair.a.cols
    m = pair.b.rows
    with open(path, "wb") as fh:
        fh.write(FACTOR_MAGIC)
        fh.write(struct.pack("<QQQ", n, m, r))
        fh.write(pair.a.data.astype("<f8").tobytes())
        fh.write(pair.b.data.astype("<f8").tobytes())


def read_factor_file(path, layer: int = 0) -> LoRAFactorPair:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FACTOR_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    n, m, r = struct.unpack_from("<QQQ", blob, 4)
    offset = 4 + 24
    need = offset + 8 * (n * r + m * r)
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    a = np.frombuffer(blob, dtype="<f8", count=n * r, offset=offset).astype(np.float64)
    b = np.frombuffer(blob, dtype="<f8", count=m * r, offset=offset + 8 * n * r)
    return LoRAFactorPair(
        layer=layer, a=Matrix(n, r, a), b=Matrix(m, r, b.astype(np.float64))
    )
