"""Seeded, splittable random streams.

All stochastic operations in the package take an explicit generator
handle.  Streams are numpy Generators over the Philox counter-based bit
generator; independent substreams come from ``split``, which spawns
children off the underlying seed sequence.  Generators are never shared
across concurrent jobs; each job owns its own split.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Root generator for a 64-bit unsigned seed."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Spawn ``n`` independent child streams without disturbing ``rng``."""
    return rng.spawn(n)
