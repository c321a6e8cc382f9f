"""Deterministic random number streams.

All randomness in the package flows through `rng_for`, which derives an
independent PCG64 stream from a root seed plus a path of tags. PCG64 and
SeedSequence are documented, portable algorithms with stable streams, so
identical (seed, path) pairs reproduce bit-identical draws on any platform.
Tags may be strings (hashed with CRC32, which is stable) or integers, e.g.
``rng_for(seed, "clip", 17)``.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(tag) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"rng path tags must be non-negative, got {tag}")
        return int(tag)
    raise TypeError(f"rng path tags must be str or int, got {type(tag).__name__}")


def rng_for(seed: int, *path) -> np.random.Generator:
    """Return a Generator for the stream identified by (seed, *path)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(t) for t in path))
    return np.random.Generator(np.random.PCG64(ss))
