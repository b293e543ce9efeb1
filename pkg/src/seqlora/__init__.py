"""Sequential orthogonally-constrained low-rank adaptation on synthetic
task streams, with mechanized verification of its descent, crosstalk, and
forgetting guarantees."""

from ._kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
