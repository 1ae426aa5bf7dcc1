"""Seed derivation.

All randomness comes from numpy's PCG64 bit generator, whose stream is stable
across platforms and numpy versions. Child generators are derived from a master
seed plus a key path (ints or strings) through ``SeedSequence`` spawn keys, so a
run's stream depends only on its identity and never on execution order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_int(k) -> int:
    if isinstance(k, (bool, np.bool_)):
        return int(k)
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("seed keys must be non-negative")
        return int(k)
    if isinstance(k, float) and k.is_integer():
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def seed_sequence(master: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key_int(k) for k in keys))


def generator(master: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *keys)))


def derive_seed(master: int, *keys) -> int:
    """A 63-bit integer seed for (master, keys), for storing in records."""
    return int(seed_sequence(master, *keys).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
