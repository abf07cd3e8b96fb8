"""Seeded random streams.

Backed by numpy's Philox counter-based generator, whose output for a given
seed is fixed across platforms and numpy versions.
"""
from __future__ import annotations

import zlib

import numpy as np


class Rng:
    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

    def fork(self, key: str | int) -> "Rng":
        """Independent child stream; depends only on (seed, key), not on draws so far."""
        if isinstance(key, str):
            key = zlib.crc32(key.encode())
        return Rng((self.seed * 0x9E3779B97F4A7C15 + int(key) + 1) % 2**64)

    def normal(self, shape, std=1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def trunc_normal(self, shape, std=0.02, bound=2.0, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) truncated to [-bound*std, bound*std] by resampling."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n)."""
        return self._gen.choice(n, size=k, replace=False)
