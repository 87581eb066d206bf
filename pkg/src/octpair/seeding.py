"""Hierarchical seed derivation.

Every random stream in the pipeline is derived from one master seed and a
path of string/int keys, so any single stage can be rerun in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_words(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(master: int, *keys) -> int:
    """Deterministic 63-bit seed for the stream named by ``keys``."""
    entropy = [int(master) & 0xFFFFFFFF, (int(master) >> 32) & 0xFFFFFFFF]
    entropy += [_key_words(k) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def rng_for(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
