"""Deterministic hierarchical random streams.

Every stochastic step draws from a stream addressed by (master seed, purpose,
indices...), so adding or removing one step never shifts the randomness seen
by another.  String purposes are hashed with crc32, which is stable across
platforms and sessions.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def substream(seed, *parts) -> np.random.Generator:
    """Generator for the stream addressed by seed and the given key parts."""
    spawn_key = tuple(_key(p) for p in parts)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))
