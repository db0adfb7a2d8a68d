"""Deterministic counter-based random number streams.

All randomness in the package flows through Philox generators keyed by a
64-bit seed plus a tuple of stream tags. Philox is counter-based, so the
same key yields the same stream on every platform, and independent streams
can be derived without consuming state from a parent generator.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, int):
        return tag & 0xFFFFFFFF
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"rng stream tag must be int or str, got {type(tag).__name__}")


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Return a Philox generator for (seed, *stream).

    Identical arguments always produce an identical stream; distinct stream
    tags produce statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in stream]
    return np.random.Generator(np.random.Philox(key=np.random.SeedSequence(entropy).generate_state(2, np.uint64)))
