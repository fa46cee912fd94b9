"""Named random substreams derived from one root seed.

Each consumer (parameter init, batch order, evaluation windows) draws from its
own stream, so adding a consumer never shifts the numbers another one sees.
"""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
