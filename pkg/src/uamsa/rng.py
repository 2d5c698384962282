"""Seeded, splittable random streams.

Every stream is a Philox-4x64 counter-based generator whose 128-bit key is
derived from ``(seed, stream)`` through numpy's ``SeedSequence`` hashing.
Distinct keys give distinct Philox permutations, so two streams never walk
the same counter sequence; each has a period of 2**256 draws, which covers
the required 2**40 non-overlap by a wide margin.  Reproducibility is promised
within one installation (numpy version), not across builds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class Rng:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream <= _MASK64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "Rng":
        """Derive an independent sub-stream, e.g. one per MC pass or per epoch."""
        return Rng(self.seed, _splitmix64(self.stream ^ _splitmix64(index + 1)))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, Rng):
        return rng.generator()
    raise TypeError(f"expected Rng or numpy Generator, got {type(rng).__name__}")
