"""Seed fan-out and the portable generator used for patch selection.

Every random draw in the package descends from one integer ``seed``.  A
consumer asks for a stream by role tag::

    child = derive_seed(seed, "backbone-init")   # splitmix64(seed ^ crc32(tag) << 32)
    rng = numpy_rng(seed, "backbone-init")        # numpy PCG64 seeded with child

Patch selection does not go through numpy at all: it uses SplitMix64
(algorithm id ``splitmix64``, 64-bit state, Steele/Lea/Flood 2014), so the
chosen subset is identical on every platform and numpy version.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "splitmix64"
_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` by rejection."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n


def derive_seed(seed: int, tag: str) -> int:
    mixer = SplitMix64(int(seed) ^ (zlib.crc32(tag.encode("utf-8")) << 32))
    return mixer.next_u64()


def numpy_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, tag)))


def sample_without_replacement(n: int, k: int, seed: int) -> list[int]:
    """Partial Fisher-Yates draw of ``k`` of ``range(n)``, returned sorted."""
    gen = SplitMix64(derive_seed(seed, "patch-select"))
    pool = list(range(n))
    for i in range(k):
        j = i + gen.below(n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:k])
