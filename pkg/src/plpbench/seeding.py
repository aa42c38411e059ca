"""Deterministic seed derivation.

Every stochastic component receives a seed derived from the study master
seed and a tuple of tags (task, store, method, purpose). The mixing function
is splitmix64 applied to the running state XOR-ed with the FNV-1a hash of
each tag's UTF-8 text:

    state = splitmix64(master_seed)
    for tag in tags:
        state = splitmix64(state ^ fnv1a64(str(tag)))

All arithmetic is modulo 2**64.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def derive_seed(master_seed: int, *tags: object) -> int:
    state = splitmix64(int(master_seed) & MASK64)
    for tag in tags:
        state = splitmix64(state ^ fnv1a64(str(tag)))
    return state


def rng_for(master_seed: int, *tags: object) -> np.random.Generator:
    """A PCG64 generator seeded from ``derive_seed(master_seed, *tags)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, *tags)))
