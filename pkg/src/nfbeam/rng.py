"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream)`` with the episode/slot ``index`` placed in the high counter
word, so any single stream can be regenerated without replaying the others.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    """Stable 32-bit id for a named stream."""
    return zlib.crc32(name.encode("utf-8")) & 0xFFFFFFFF


def counter_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, stream, index)``.

    Draws advance the low counter word, so distinct ``index`` values never
    overlap for fewer than 2**64 draws each.
    """
    key = np.array([int(seed) & _MASK64, stream_id(stream)], dtype=np.uint64)
    counter = np.array([0, 0, 0, int(index) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
