"""Named random sub-streams derived from one run seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` so stages do not perturb each other."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(key))


def subseed(seed: int, name: str, *extra: int) -> int:
    return int(substream(seed, name, *extra).integers(0, 2**31 - 1))
