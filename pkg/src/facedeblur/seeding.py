"""Deterministic RNG construction from structured integer entropy."""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def make_rng(*entropy: int) -> np.random.Generator:
    """Generator seeded from a tuple of integers (negatives are wrapped)."""
    return np.random.default_rng([int(e) & _MASK for e in entropy])
