# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""rng.py: splitmix64-seeded xoshiro256** random numbers.

Both generators follow their published reference implementations bit for bit,
so datasets generated from a seed are identical on every platform.
"""

import typing as t

import numpy as np

MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def mix(*values: int) -> int:
    """Fold integers into one well-spread 64-bit seed."""
    state = 0
    for v in values:
        state = SplitMix64(state ^ (v & MASK64)).next_u64()
    return state


class Xoshiro256:
    """
    xoshiro256** generator.

    Args:
      state: four 64-bit words, not all zero. Use from_seed() to derive
        them from a single seed.
    """

    def __init__(self, state: t.Sequence[int]):
        self.s = [w & MASK64 for w in state]

    @classmethod
    def from_seed(cls, seed: int) -> "Xoshiro256":
        sm = SplitMix64(seed)
        return cls([sm.next_u64() for _ in range(4)])

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        shifted = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= shifted
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high], inclusive."""
        return low + int(self.random() * (high - low + 1))

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def numpy_generator(self) -> np.random.Generator:
        """A numpy generator seeded from this stream, for bulk draws."""
        return np.random.default_rng(self.next_u64())
