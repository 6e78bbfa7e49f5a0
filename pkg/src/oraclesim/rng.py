"""Seeded, splittable random streams.

Each consumer asks for a stream keyed by ``(seed, purpose, *keys)``; streams
with different keys are statistically independent and never overlap, so an
instance generator and a permutation sampler can share one seed safely.
"""
from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``purpose`` (e.g. ``"perm-step2"``) at ``keys`` (layer, head, trial...)."""
    tag = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, *map(int, keys)))
    return np.random.Generator(np.random.PCG64(ss))
