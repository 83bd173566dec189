"""Deterministic random numbers with named, independent streams.

Built on the counter-based Philox generator, keyed by (seed, stream name).
The same (seed, stream) pair yields the identical sequence on every platform,
and adding a new consumer stream never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _stream_key(name: str) -> int:
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """Counter-based generator bound to a (seed, stream) pair."""

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed) & _MASK64
        self.stream = stream
        key = (self.seed << 64) | _stream_key(stream)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "SeededRng":
        """Derive an independent stream; same (seed, path) -> same sequence."""
        return SeededRng(self.seed, f"{self.stream}/{name}")

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        dtype = np.dtype(dtype)
        return self._gen.standard_normal(shape, dtype=dtype) * dtype.type(std)

    def truncated_normal(self, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
        """Normal(0, std) with resampling outside +-2 std."""
        out = self._gen.standard_normal(shape, dtype=np.float64)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()), dtype=np.float64)
            bad = np.abs(out) > 2.0
        return (out * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        u = self._gen.random(shape, dtype=np.float64)
        return (low + (high - low) * u).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
