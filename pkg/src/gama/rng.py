"""Deterministic random streams.

Every consumer of randomness gets its own PCG64 stream derived from one
master seed, so adding a draw in one place never shifts the numbers seen
by another. Derivation: consumer `name` with substream `sub` uses
``PCG64(seed).jumped(BASE[name] * 2**24 + sub)``; ``jumped(k)`` advances
the generator by k * 2**127 steps, so distinct indices yield
non-overlapping streams. Substreams let per-sample work (scene
rendering, per-epoch shuffles) stay independent of iteration order.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

# Fixed consumer registry. New consumers must be appended, never reordered,
# or every artifact checksum changes.
_CONSUMERS = {
    "dataset": 0,
    "init": 1,
    "candidates": 2,
    "shuffle": 3,
    "pgd": 4,
    "pca": 5,
    "eval": 6,
}

_SUB_SPAN = 2 ** 24


class Streams:
    """Factory of named, reproducible `numpy.random.Generator` streams."""

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)

    def stream(self, consumer: str, sub: int = 0) -> np.random.Generator:
        if consumer not in _CONSUMERS:
            raise ConfigError(f"unknown rng consumer {consumer!r}; known: {sorted(_CONSUMERS)}")
        if not 0 <= sub < _SUB_SPAN:
            raise ConfigError(f"substream index {sub} outside [0, {_SUB_SPAN})")
        jumps = _CONSUMERS[consumer] * _SUB_SPAN + sub
        return np.random.Generator(np.random.PCG64(self.seed).jumped(jumps))
