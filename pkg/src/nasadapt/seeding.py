"""Deterministic fan-out of one global seed into per-module seeds.

Every randomized stage derives its own seed as ``seed XOR crc32(tag)``,
masked to 31 bits. Stages therefore stay independently reproducible: the
dataset for seed 7 is the same whether it is generated standalone or as
part of an end-to-end run. See docs/determinism.md.
"""

import zlib

import numpy as np


def seed_for(seed: int, tag: str) -> int:
    """Derive the seed for a named stage from the global seed."""
    return (int(seed) ^ zlib.crc32(tag.encode("utf-8"))) & 0x7FFFFFFF


def rng_for(seed: int, tag: str) -> np.random.Generator:
    """PCG64 generator for a named stage."""
    return np.random.Generator(np.random.PCG64(seed_for(seed, tag)))
