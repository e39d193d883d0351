"""Seed derivation: every random stream is keyed by (seed, purpose tag)."""

import zlib

import numpy as np


def derive_seed(seed: int, tag: str) -> int:
    """Derive a child seed from a top-level seed and a purpose tag.

    The tag is hashed with CRC-32 so the mapping is stable across Python
    versions and platforms; the pair is fed to ``numpy.random.SeedSequence``.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; normals come from its ziggurat sampler."""
    return np.random.Generator(np.random.PCG64(int(seed)))
