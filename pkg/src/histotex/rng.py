"""Keyed deterministic random streams.

Every stochastic component (weight init, shuffling, augmentation, dropout,
pixel subsampling) draws from a generator derived from one root seed plus a
structural key, so results do not depend on evaluation order or thread
schedule.
"""

from __future__ import annotations

import zlib

import numpy as np

_U64 = (1 << 64) - 1


class RngStream:
    """Root seed that can be split into independent, reproducible generators.

    Identical ``(seed, purpose, epoch, index)`` keys yield bit-identical
    generators across runs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64

    def generator(self, purpose: str, epoch: int = 0, index: int = 0) -> np.random.Generator:
        """Return a fresh generator for the given stream key."""
        tag = zlib.crc32(purpose.encode("utf-8"))
        ss = np.random.SeedSequence([self.seed, tag, int(epoch) & _U64, int(index) & _U64])
        return np.random.default_rng(ss)

    def child(self, purpose: str) -> "RngStream":
        """Derive a sub-stream rooted at ``purpose`` (for nested components)."""
        tag = zlib.crc32(purpose.encode("utf-8"))
        return RngStream((self.seed * 0x9E3779B97F4A7C15 + tag) & _U64)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed})"
