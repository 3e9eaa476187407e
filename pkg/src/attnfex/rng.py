"""Deterministic random numbers.

The generator is counter-based (SplitMix64): draw ``i`` of a stream seeded
with ``s`` is ``mix64(s + (i+1) * GAMMA)``, so a seed fully determines the
sequence and the scheme is easy to reproduce in any language.  Sub-streams
are derived by hashing a text label into the seed (FNV-1a), which keeps the
randomness of one pipeline stage independent of the others.
"""

from __future__ import annotations

import math

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U53_SCALE = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, label: str) -> int:
    """Hash (seed, label) into a new 64-bit seed for an independent stream."""
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = (h ^ np.uint64(byte)) * _FNV_PRIME
    return int(_mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ h))


class Rng:
    """Seeded counter-based generator with the draw primitives used here."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._base = np.uint64(self.seed)
        self._count = 0

    def spawn(self, label: str) -> "Rng":
        return Rng(derive_seed(self.seed, label))

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix64(self._base + idx * _GAMMA)

    def uniform(self, size=None) -> np.ndarray | float:
        """Doubles in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        """Standard Box-Muller normals."""
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = 1.0 - np.asarray(self.uniform(pairs))  # (0, 1]
        u2 = np.asarray(self.uniform(pairs))
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * math.pi * u2)
        out[1::2] = r * np.sin(2.0 * math.pi * u2)
        out = loc + scale * out[:n]
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def truncated_normal(self, size, scale: float = 1.0, clip: float = 2.0) -> np.ndarray:
        """Normals redrawn until within ``clip`` standard deviations."""
        n = int(np.prod(size))
        out = np.asarray(self.normal(n)).copy()
        bad = np.abs(out) > clip
        while bad.any():
            out[bad] = self.normal(int(bad.sum()))
            bad = np.abs(out) > clip
        return (out * scale).reshape(size)

    def integers(self, n: int, size=None):
        """Uniform integers in [0, n). Modulo reduction of 64-bit words."""
        if n <= 0:
            raise ValueError("integers() needs n >= 1")
        count = 1 if size is None else int(np.prod(size))
        vals = (self._words(count) % np.uint64(n)).astype(np.int64)
        if size is None:
            return int(vals[0])
        return vals.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return np.asarray(self.uniform(size)) < p
