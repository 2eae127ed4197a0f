"""Deterministic random numbers, independent of numpy's global state.

The generator is SplitMix64 run in counter mode: draw i of a stream with
key s is finalize(s + (i + 1) * GAMMA), where finalize is the usual
xorshift-multiply mixer.  Counter mode makes the stream a pure function
of (key, index), so bulk draws vectorize and parallel producers can
derive disjoint streams with `mix64`.  All fixtures in the test suite
assume this exact algorithm; do not swap it for numpy's RNG.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Stream tags used when deriving per-purpose seeds from one user seed.
TAG_TRAIN_SPLIT = 0
TAG_VAL_SPLIT = 1
TAG_TEST_SPLIT = 2
TAG_INIT = 3
TAG_SHUFFLE = 4
TAG_BRANCH = 5
TAG_STICKER = 6


def _finalize_scalar(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def mix64(*parts: int) -> int:
    """Fold integers into one 64-bit seed. Order matters."""
    h = 0
    for p in parts:
        h = _finalize_scalar((h + _GAMMA) ^ (int(p) & _MASK))
    return h


def _finalize_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps silently for arrays, which is what we want.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """One SplitMix64 stream. Draw order is part of the contract."""

    def __init__(self, seed: int):
        self._key = np.uint64(int(seed) & _MASK)
        self._count = 0

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words, shape (n,) uint64."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        return _finalize_array(self._key + idx * np.uint64(_GAMMA))

    def floats(self, n: int) -> np.ndarray:
        """Next n doubles, uniform in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self.floats(n)

    def ints(self, n: int, bound: int) -> np.ndarray:
        """Next n integers in [0, bound). Multiply-shift, not rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.floats(n) * bound).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n), one draw per position."""
        out = np.arange(n, dtype=np.int64)
        if n < 2:
            return out
        u = self.floats(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            out[i], out[j] = out[j], out[i]
        return out

    def kaiming_uniform(self, shape: tuple[int, ...], fan_in: int,
                        dtype=np.float32) -> np.ndarray:
        """Weights uniform in +-sqrt(6 / fan_in), drawn in f64 then cast."""
        bound = float(np.sqrt(6.0 / fan_in))
        n = int(np.prod(shape))
        return self.uniform(n, -bound, bound).reshape(shape).astype(dtype)
