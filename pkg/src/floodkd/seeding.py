"""Hierarchical seed derivation.

Every run owns one u64 seed. Components draw child seeds by name, e.g.
``derive_seed(seed, "train", "init")``; the child depends only on the root
seed and that name path, so adding a new component elsewhere never shifts
existing streams. Names are hashed with CRC-32 into a
``numpy.random.SeedSequence`` spawn key.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(seed: int, *path) -> int:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *path))
