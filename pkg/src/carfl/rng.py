"""Seeded random streams built on splitmix64.

Every random draw in the package (encoder weights, dataset blobs, batch
shuffles, dropout masks, DP noise) goes through :class:`Stream` so a run is
fully determined by its integer seeds, independent of numpy's global state
or platform.
"""

from __future__ import annotations

import zlib

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """Scalar splitmix64 finalizer."""
    return int(_mix(np.array([x & _MASK64], dtype=np.uint64))[0])


def derive_seed(seed: int, *parts: int | str) -> int:
    """Derive a child seed from ``seed`` and a path of labels.

    Strings are folded in through CRC32 so labels like ``"shuffle"`` are
    stable across interpreters (unlike ``hash``).
    """
    h = mix64(seed)
    for part in parts:
        if isinstance(part, str):
            part = zlib.crc32(part.encode()) | (1 << 40)
        h = mix64(h ^ mix64(int(part) + 0x632BE59BD9B4E019))
    return h


class Stream:
    """Counter-based splitmix64 stream.

    Blocks are generated vectorised: output ``k`` is the mix of
    ``seed + (k + 1) * gamma``, exactly as the sequential algorithm would
    produce, so draw order is the only thing that matters.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed & _MASK64
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix(np.uint64(self.seed) + k * _GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_range(self, low: float, high: float, shape) -> np.ndarray:
        size = int(np.prod(shape))
        return (low + (high - low) * self.uniform(size)).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normals by Box-Muller over consecutive uniform pairs.

        Pair ``j`` consumes uniforms ``2j`` and ``2j+1`` and yields the cosine
        then the sine branch; an odd trailing value is discarded.
        """
        size = int(np.prod(shape))
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:size].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
