"""Seed derivation.

Every random stream in the package is a child of one master seed. Children
are obtained with a splitmix64 finaliser so that the stream of path ``i``
depends only on ``(master_seed, i)`` and never on scheduling.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(master_seed: int, index: int) -> int:
    """Return a 64-bit child seed for stream ``index`` of ``master_seed``."""
    z = (int(master_seed) + _GOLDEN * (int(index) + 1)) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def child_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(mix64(master_seed, index)))


def path_seeds(master_seed: int, first: int, count: int) -> np.ndarray:
    return np.array([mix64(master_seed, i) for i in range(first, first + count)], dtype=np.uint64)


# Stream labels for non-path randomness, kept far from path indices.
STREAM_DIRECTIONS = 1 << 40
STREAM_PERMUTATION = (1 << 40) + 1
STREAM_KUNITA = 1 << 41
