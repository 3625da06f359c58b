"""Seed derivation for every stochastic component.

Each consumer gets its own stream identified by (seed, role, ...), so adding
or reordering one consumer never shifts the draws of another.
"""

from __future__ import annotations

import numpy as np

ROLE_INIT = 0
ROLE_SHUFFLE = 1
ROLE_DROPOUT = 2
ROLE_SPLIT = 3
ROLE_FOREST = 4
ROLE_SYNTH = 5


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for the stream identified by (seed, *path)."""
    entropy = [int(seed)] + [int(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
