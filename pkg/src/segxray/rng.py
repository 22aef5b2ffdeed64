"""Counter-based random streams.

Every stochastic component (dropout masks, jitter, patch sampling, data
generation, parameter init) draws from a Philox generator keyed by a
``(seed, substream)`` pair and positioned by a counter, so draws are
reproducible across platforms and independent of call order elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    counter: int = 0

    def generator(self, substream: int = 0) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, substream & _MASK64], dtype=np.uint64)
        counter = np.array([self.counter & _MASK64, 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def advance(self, n: int = 1) -> "RngStream":
        # Philox blocks are 4 x 64 bits; leave 2**32 blocks of headroom per step.
        return RngStream(self.seed, self.counter + (n << 32))

    def child(self, index: int) -> "RngStream":
        """Derive an independent stream, e.g. one per sample or per job."""
        mixed = np.random.SeedSequence([self.seed & _MASK64, self.counter & _MASK64, index])
        return RngStream(int(mixed.generate_state(2, np.uint64)[0]), 0)
