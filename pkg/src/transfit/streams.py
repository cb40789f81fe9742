"""Deterministic RNG stream derivation.

Every randomized task draws from a PCG64 generator seeded by
SeedSequence(entropy=seed, spawn_key=(purpose, index...)), so results are
reproducible and independent of worker count or execution order.
"""

import numpy as np

SIMULATE = 1
REPLICATE = 2
BOOTSTRAP = 3
POWER = 4


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the (seed, key...) stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
