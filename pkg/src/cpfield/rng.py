"""Splittable random streams keyed by (root seed, path)."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

_TAG_BIT = 1 << 32


def _tag_id(tag: str) -> int:
    # tags live above 2**32 so they never collide with replication indices
    return _TAG_BIT | zlib.crc32(tag.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """An independent random stream identified by ``(seed, path)``.

    The path is a tuple of replication indices and purpose tags; a Philox
    counter generator is keyed from it, so identical ``(seed, path)`` always
    reproduces the same draws regardless of scheduling.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def spawn(self, index: int) -> RngStream:
        if index < 0 or index >= _TAG_BIT:
            raise ValueError(f"replication index out of range: {index}")
        return RngStream(self.seed, self.path + (int(index),))

    def child(self, tag: str) -> RngStream:
        return RngStream(self.seed, self.path + (_tag_id(tag),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    @property
    def rep_index(self) -> int:
        reps = [p for p in self.path if p < _TAG_BIT]
        return reps[-1] if reps else 0
