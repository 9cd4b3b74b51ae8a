"""Deterministic random-stream derivation.

Every stochastic routine takes an explicit ``numpy.random.Generator``.
Parallel or per-item work derives child streams from a root
``SeedSequence`` by spawn-key extension, so results do not depend on
execution order or worker count.
"""

from __future__ import annotations

import numpy as np

__all__ = ["as_seedseq", "substream", "spawn_rngs"]


def as_seedseq(seed) -> np.random.SeedSequence:
    """Coerce an int, SeedSequence, or None into a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def substream(root: np.random.SeedSequence, *key: int) -> np.random.Generator:
    """Generator for the child stream addressed by ``key`` under ``root``.

    The same (root, key) pair always yields the same stream, independent
    of how many other streams were derived before it.
    """
    child = np.random.SeedSequence(
        entropy=root.entropy, spawn_key=tuple(root.spawn_key) + tuple(int(k) for k in key)
    )
    return np.random.default_rng(child)


def spawn_rngs(root: np.random.SeedSequence, n: int) -> list[np.random.Generator]:
    """n independent generators keyed 0..n-1 under ``root``."""
    return [substream(root, k) for k in range(n)]
