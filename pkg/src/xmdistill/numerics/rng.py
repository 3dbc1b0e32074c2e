"""Seeded, platform-stable random streams.

All randomness in the package goes through :class:`SeededRng`, a thin wrapper
over numpy's Philox4x64 counter-based bit generator. Child streams are derived
by hashing ``(seed, *keys)`` through :class:`numpy.random.SeedSequence`, so a
shuffle for ``(seed, epoch)`` never depends on how many draws happened before.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"


class SeededRng:
    algorithm = ALGORITHM

    def __init__(self, seed: int, *keys: int):
        if seed < 0 or any(k < 0 for k in keys):
            raise ValueError("seed and keys must be non-negative")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``."""
        return self._gen.choice(n, size=size, replace=False)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, keys={self.keys}, algorithm={self.algorithm!r})"
