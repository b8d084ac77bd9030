"""Seed-derived, counter-based random substreams.

Every random draw in the package comes from a generator addressed by a root
seed and a path of labels, e.g. ``("reverse_sde", chain, step, "kernel")``.
Streams are Philox (counter-based) generators keyed through
``numpy.random.SeedSequence``, so the numbers a chain sees do not depend on
how chains are batched or how many workers run them.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

Label = Union[str, int]

_MASK64 = (1 << 64) - 1


def _label_to_int(label: Label) -> int:
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("stream labels must be str or int")
    if isinstance(label, (int, np.integer)):
        value = int(label)
        if value < 0:
            raise ValueError(f"negative stream index {value}")
        return value
    if isinstance(label, str):
        # crc32 is stable across interpreters, unlike hash()
        return zlib.crc32(label.encode("utf-8")) | (1 << 32)
    raise TypeError(f"unsupported stream label {label!r}")


@dataclass(frozen=True)
class RngSeed:
    """A root seed plus a hierarchical stream path."""

    seed: int
    path: tuple[Label, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        for label in self.path:
            _label_to_int(label)

    def child(self, *labels: Label) -> "RngSeed":
        return RngSeed(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        key = tuple(_label_to_int(label) for label in self.path)
        ss = np.random.SeedSequence(int(self.seed), spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))


def stream(seed: Union[int, RngSeed], *labels: Label) -> np.random.Generator:
    """Generator for ``seed`` extended by ``labels``."""
    if not isinstance(seed, RngSeed):
        seed = RngSeed(int(seed))
    return seed.child(*labels).generator()
