"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """Operand dimensions are inconsistent."""


class NotPositiveDefiniteError(RuntimeError):
    """Cholesky hit a non-positive pivot; the Gram matrix is degenerate and
    the caller must regularize."""


class NumericalError(RuntimeError):
    """An iteration failed to converge or produced non-finite values."""


class CapacityError(RuntimeError):
    """A registry append would exceed the per-layer concept capacity."""


class OrthogonalityError(RuntimeError):
    """A basis violates the orthogonality tolerance against stored bases."""


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""
