"""Counter-based random streams.

All randomness flows from a master seed through Philox generators keyed by
``(seed, *stream_id)``, so every consumer (table sampling, context layout,
noise draws, evaluation) is independently reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, float):
        return zlib.crc32(repr(part).encode())
    return zlib.crc32(str(part).encode())


def stream(seed: int, *stream_id) -> np.random.Generator:
    """Generator for the stream ``stream_id`` under master ``seed``."""
    entropy = [_key_part(seed)] + [_key_part(p) for p in stream_id]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
