"""Seeded PRNG with a fixed, named algorithm (xoshiro256** seeded via splitmix64).

Corpus generation must be reproducible across machines and implementations,
so it cannot depend on any library's unspecified generator. Everything here
is pure integer/float arithmetic.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def hash64(*parts: int) -> int:
    """Deterministic 64-bit mix of integer parts (for id hashing / seed derivation)."""
    h = 0x8C5FB1FDA1A2B3C4
    for p in parts:
        h, out = splitmix64((h ^ (p & _MASK64)) & _MASK64)
        h = out
    return h


def hash_str(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** generator."""

    def __init__(self, seed: int):
        s = seed & _MASK64
        self.s = []
        for _ in range(4):
            s, out = splitmix64(s)
            self.s.append(out)
        self._gauss_spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        # Rejection-free floor; bias is < 2^-53 * n, negligible for corpus sizes.
        return min(int(self.random() * n), n - 1)

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def gauss(self) -> float:
        """Standard normal via Box-Muller (deterministic draw order)."""
        if self._gauss_spare is not None:
            z = self._gauss_spare
            self._gauss_spare = None
            return z
        u1 = self.random()
        u2 = self.random()
        while u1 <= 1e-300:
            u1 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._gauss_spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)
