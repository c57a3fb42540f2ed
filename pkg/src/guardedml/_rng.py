"""Deterministic seed derivation for parallel work units.

Every (fold, model, grid-point, replicate) unit draws from its own substream
derived from the master seed, so results are identical for any worker count.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def mix64(*parts: int) -> int:
    """Collapse integer parts into one well-mixed 64-bit seed.

    Splitmix64 finalizer applied once per part; order-sensitive.
    """
    h = 0
    for p in parts:
        h = (h + _GAMMA + (int(p) & _MASK)) & _MASK
        h ^= h >> 30
        h = (h * 0xBF58476D1CE4E5B9) & _MASK
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & _MASK
        h ^= h >> 31
    return h


def substream(*parts: int) -> np.random.Generator:
    """Independent generator keyed by the given integer path."""
    return np.random.Generator(np.random.PCG64(mix64(*parts)))
