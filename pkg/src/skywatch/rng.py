"""Named random sub-streams derived from one global seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return an independent generator for ``name`` under ``seed``.

    The same (seed, name, extra) triple always yields the same stream, and
    different names never share state, so components can be varied
    independently of one another.
    """
    return np.random.default_rng([int(seed), stream_key(name), *map(int, extra)])


def as_generator(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)
