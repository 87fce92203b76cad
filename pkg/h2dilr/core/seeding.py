"""Seeded random streams.

Every random draw in the package comes from a generator derived from the run
seed plus a purpose label (data, init, shuffle, probe) and optional integer
keys, so streams are independent of call order and of each other.
"""

import zlib

import numpy as np

STREAM_LABELS = ("data", "init", "shuffle", "probe")


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def derive_rng(seed: int, label: str, *keys: int | str) -> np.random.Generator:
    """Return a PCG64 generator for (seed, label, *keys)."""
    spawn_key = [_label_key(label)]
    for key in keys:
        spawn_key.append(_label_key(key) if isinstance(key, str) else int(key))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))
