"""SplitMix64, vectorised over numpy uint64.

The generator is counter based: output ``i`` of a stream seeded with ``s`` is
``mix(s + (i + 1) * GOLDEN)``, so blocks can be produced in one numpy call and
the sequence is the same on every platform.
"""
from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = np.uint64(seed % 2**64)

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _mix(self.state + steps * GOLDEN)
            self.state = self.state + np.uint64(n) * GOLDEN
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller pairs; consumes ``2 * ceil(n / 2)`` outputs."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high) by multiply-shift on the top 32 bits."""
        top = (self.next_u64(n) >> np.uint64(32)).astype(np.uint64)
        with np.errstate(over="ignore"):
            return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64)
