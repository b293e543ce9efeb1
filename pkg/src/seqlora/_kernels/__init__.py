"""Kernel backend selection.

The compiled extension is preferred when present; the pure-Python twin is
the fallback.  ``SEQLORA_BACKEND=pure|compiled`` forces a choice (useful
for benchmarking and parity checks).  Both backends are bit-identical, so
the selection never changes results, only speed.
"""

from __future__ import annotations

import os
import warnings

_requested = os.environ.get("SEQLORA_BACKEND", "auto").lower()

if _requested not in ("auto", "pure", "compiled"):
    raise ValueError(
        f"SEQLORA_BACKEND must be 'auto', 'pure' or 'compiled', got {_requested!r}"
    )

if _requested == "pure":
    from . import pyref as impl
elif _requested == "compiled":
    from . import ckern as impl  # type: ignore[no-redef]
else:
    try:
        from . import ckern as impl  # type: ignore[no-redef]
    except ImportError:
        from . import pyref as impl
        warnings.warn(
            "seqlora compiled kernels not found; using the pure-Python "
            "fallback (identical results, slower)",
            RuntimeWarning,
            stacklevel=2,
        )

BACKEND = impl.BACKEND_NAME

mat_mul = impl.mat_mul
jacobi_eigh = impl.jacobi_eigh
cholesky_factor = impl.cholesky_factor
cholesky_solve = impl.cholesky_solve
qr_orthonormal = impl.qr_orthonormal
power_iter_sigma = impl.power_iter_sigma
