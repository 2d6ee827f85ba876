"""Deterministic random streams.

Every random choice the toolkit makes flows from one integer seed. Two
generators cover the two kinds of consumers:

* ``Xorshift64Star`` is a portable, fully specified generator used for
  data synthesis and neighbor sampling, where bit-level reproducibility
  of the emitted artifacts matters. It is the xorshift64* generator:
  state updates ``s ^= s >> 12; s ^= s << 25; s ^= s >> 27`` and output
  ``s * 0x2545F4914F6CDD1D``, all in 64-bit arithmetic. Seeding and
  stream derivation go through splitmix64 so the zero state can never
  occur and sibling streams decorrelate.

* ``substream`` returns a seeded ``numpy.random.Generator`` (PCG64) for
  bulk vectorized draws: weight init, epoch shuffles, dropout masks.

Sub-streams are derived by hashing ``(seed, *tags)`` where tags are
stringified and folded with FNV-1a; the same tag tuple always yields
the same stream, and distinct tag tuples yield independent ones.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1

# splitmix64 constants (Steele, Lea, Flood 2014)
_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MUL1 = 0xBF58476D1CE4E5B9
_SM_MUL2 = 0x94D049BB133111EB

# FNV-1a 64-bit
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    """One splitmix64 output step for the given 64-bit state."""
    x = (x + _SM_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * _SM_MUL1) & _MASK64
    x = ((x ^ (x >> 27)) * _SM_MUL2) & _MASK64
    return x ^ (x >> 31)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _mix_tags(seed: int, tags) -> int:
    x = splitmix64(seed & _MASK64)
    for tag in tags:
        x = splitmix64(x ^ fnv1a64(str(tag).encode("utf-8")))
    return x


class Xorshift64Star:
    """Portable 64-bit xorshift* stream. Never touches the system RNG."""

    __slots__ = ("state", "_spare_normal")

    def __init__(self, seed: int, *tags):
        s = _mix_tags(int(seed), tags)
        # xorshift forbids the all-zero state
        self.state = s if s != 0 else _SM_GAMMA
        self._spare_normal = None

    def derive(self, *tags) -> "Xorshift64Star":
        """Independent child stream keyed by the tag tuple."""
        return Xorshift64Star(self.state, *tags)

    def next_u64(self) -> int:
        s = self.state
        s ^= s >> 12
        s ^= (s << 25) & _MASK64
        s ^= s >> 27
        self.state = s
        return (s * 0x2545F4914F6CDD1D) & _MASK64

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def normal(self) -> float:
        """Standard normal via Box-Muller, one spare cached per pair."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] so log never sees zero
        u1 = ((self.next_u64() >> 11) + 1) * (2.0 ** -53)
        u2 = (self.next_u64() >> 11) * (2.0 ** -53)
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def sample(self, seq, k: int) -> list:
        """k distinct items via partial Fisher-Yates over a copy."""
        if k > len(seq):
            raise ValueError("sample larger than population")
        pool = list(seq)
        for i in range(k):
            j = i + self.randint(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def choice(self, seq):
        if not len(seq):
            raise ValueError("choice from empty sequence")
        return seq[self.randint(len(seq))]


def substream(seed: int, *tags) -> np.random.Generator:
    """Seeded numpy generator for vectorized draws (init, shuffle, dropout)."""
    entropy = [int(seed) & _MASK64] + [fnv1a64(str(t).encode("utf-8")) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
