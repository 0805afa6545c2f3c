"""Seed derivation.

Every random consumer gets its own stream from (master seed, stage, consumer)
so stages stay reproducible regardless of execution order::

    h = splitmix64(seed)
    h = splitmix64(h ^ fnv1a64(stage))
    h = splitmix64(h ^ fnv1a64(str(consumer)))

The result seeds a numpy PCG64 generator.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, stage: str, consumer="") -> int:
    h = splitmix64(int(seed) & MASK64)
    h = splitmix64(h ^ fnv1a64(stage))
    return splitmix64(h ^ fnv1a64(str(consumer)))


def make_rng(seed: int, stage: str, consumer="") -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, stage, consumer)))
