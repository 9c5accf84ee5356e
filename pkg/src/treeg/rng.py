"""Counter-based random streams.

Every random draw in a search is keyed by ``(seed, *path)`` where the path
names the role, step, parent and branch.  Streams for different keys are
statistically independent and do not depend on evaluation order, which is
what lets candidate proposals run in any order or in parallel.
"""
from __future__ import annotations

import zlib

import numpy as np

# Stable integer tags for the roles a stream can play.
ROLES = {
    "init": 0,
    "propose": 1,
    "value": 2,
    "grad": 3,
    "refine": 4,
    "unguided": 5,
}


def _tag(part) -> int:
    if isinstance(part, str):
        return ROLES.get(part, zlib.crc32(part.encode()) + 1000)
    return int(part)


def stream(seed: int, *path) -> np.random.Generator:
    """Generator for the stream addressed by ``seed`` and ``path``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_tag(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
