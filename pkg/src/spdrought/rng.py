"""Portable deterministic randomness.

Every random draw in this package comes from a splitmix64 generator seeded
from one master seed through named substreams ("split", "init", "batch",
"dropout", ...). The generator is specified bit-for-bit below, so results
are reproducible across platforms without relying on any library RNG:

    state <- state + 0x9E3779B97F4A7C15        (mod 2^64)
    z <- state
    z <- (z XOR z>>30) * 0xBF58476D1CE4E5B9    (mod 2^64)
    z <- (z XOR z>>27) * 0x94D049BB133111EB    (mod 2^64)
    output = z XOR z>>31

Uniform doubles take the top 53 bits: u = (z >> 11) * 2^-53, giving
u in [0, 1). Normals use the Box-Muller transform on pairs of uniforms.
Substream seeds are derived as mix(seed XOR fnv1a64(name)).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_TWO53_INV = 2.0 ** -53

_GAMMA_U64 = np.uint64(_GAMMA)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _C1
    z = z ^ (z >> np.uint64(27))
    z = z * _C2
    return z ^ (z >> np.uint64(31))


def _fnv1a64(name: str) -> int:
    h = 0xCBF29CE484222325
    for b in name.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def substream_seed(seed: int, name: str) -> int:
    """Derive the seed of the named child stream of ``seed``."""
    return _mix64((seed & _MASK64) ^ _fnv1a64(name))


class SplitMix64:
    """Splitmix64 stream with vectorized draws.

    The i-th output after construction equals mix(seed + i*gamma), so the
    vectorized methods are bit-identical to repeated scalar calls.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def substream(self, name: str) -> "SplitMix64":
        """Child generator independent of this stream's position."""
        return SplitMix64(substream_seed(self._state, name))

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        base = np.uint64(self._state)
        steps = (np.arange(1, n + 1, dtype=np.uint64)) * _GAMMA_U64
        with np.errstate(over="ignore"):
            out = _mix64_vec(base + steps)
        self._state = (self._state + n * _GAMMA) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _TWO53_INV

    def uniform_open(self, n: int) -> np.ndarray:
        """``n`` doubles in (0, 1] (safe for log)."""
        return ((self.u64(n) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _TWO53_INV

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normals via Box-Muller."""
        m = (n + 1) // 2
        u1 = self.uniform_open(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, bound: int, n: int | None = None):
        """Integers uniform on [0, bound) via the 53-bit double path."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        if n is None:
            return int(self.uniform(1)[0] * bound)
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        out = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def shuffle(self, values: list) -> None:
        """In-place Fisher-Yates shuffle of a list."""
        for i in range(len(values) - 1, 0, -1):
            j = self.integers(i + 1)
            values[i], values[j] = values[j], values[i]
