"""Seeded random streams with named, mutually independent substreams.

Every stochastic stage of the pipeline (rescaling, patch corners, erasing,
shuffling, weight init) pulls from its own generator, so the draw sequence
of one stage never depends on how many draws another stage made.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _substream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """A 64-bit seed fanned out into independent named substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._generators: dict[str, np.random.Generator] = {}

    def substream(self, name: str) -> np.random.Generator:
        """Return the generator for `name`, creating it on first use.

        The same (seed, name) pair always yields the same draw sequence,
        regardless of which other substreams were touched before.
        """
        gen = self._generators.get(name)
        if gen is None:
            gen = np.random.default_rng([self.seed, _substream_key(name)])
            self._generators[name] = gen
        return gen
