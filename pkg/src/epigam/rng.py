"""Seeded, splittable random-number streams (scheme "epigam-rng-v1").

Every stochastic routine takes an integer seed and derives independent
substreams through ``substream(seed, *path)``.  A path component is either an
integer (replicate index) or a short string (component name); strings are
mapped to integers with CRC-32 so the scheme is reproducible across platforms
and process boundaries.  The underlying bit generator is numpy's PCG64 keyed
by ``SeedSequence(seed, spawn_key=path)``.
"""

from __future__ import annotations

import zlib

import numpy as np

_SCHEME = "epigam-rng-v1"


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path components must be non-negative, got {part}")
        return int(part)
    raise TypeError(f"stream path component must be int or str, got {type(part)!r}")


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the substream addressed by ``path`` under ``seed``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(seq))


def scheme_name() -> str:
    return _SCHEME
