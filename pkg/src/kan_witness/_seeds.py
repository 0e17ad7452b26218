"""Deterministic derivation of random streams from a single root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stage_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_rng(seed: int, stage: str = "", index: int = 0) -> np.random.Generator:
    """Return an independent generator for ``(seed, stage, index)``.

    The same triple always yields the same stream; distinct stages or
    indices yield statistically independent streams.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stage_key(stage), int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, stage: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stage_key(stage), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
