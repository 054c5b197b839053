"""Deterministic random number generation for data synthesis and init.

Everything reproducible in this package is driven by SplitMix64, chosen
because the full algorithm fits in a handful of integer operations and
therefore produces bit-identical streams on every platform.  State update
and output mix (Steele, Lea & Flood 2014):

    state  = (state + 0x9E3779B97F4A7C15) mod 2^64
    z      = state
    z      = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  mod 2^64
    z      = (z ^ (z >> 27)) * 0x94D049BB133111EB  mod 2^64
    output = z ^ (z >> 31)

Uniform doubles take the top 53 bits of the output.  "Normal-like" draws
use an Irwin-Hall sum of 12 uniforms minus 6, which involves only IEEE
additions and so stays bit-exact across platforms (unlike Box-Muller,
whose log/cos can differ in the last ulp between libm builds).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Tiny deterministic RNG with a documented, platform-independent stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def split(self, tag: int) -> "SplitMix64":
        """Derive an independent child stream keyed by an integer tag."""
        return SplitMix64(_mix(self._state ^ _mix(tag & _MASK64)))

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def uniforms(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.uniform(low, high)
        return out.reshape(shape)

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high) via rejection-free modulo.

        The modulo bias is below 2^-50 for desk-scale ranges, far beneath
        anything the synthetic generator can resolve.
        """
        span = high - low
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        return low + self.next_u64() % span

    def normal(self) -> float:
        """Irwin-Hall(12) approximation to a standard normal draw."""
        acc = 0.0
        for _ in range(12):
            acc += self.uniform()
        return acc - 6.0

    def normals(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal()
        return out.reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]
