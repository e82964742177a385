"""
Deterministic random streams.

Every random draw in the pipeline comes from a generator keyed by the run
seed plus a tuple of labels (phase, epoch, sample id, ...), so batch
preparation can run in any order or in parallel and still reproduce.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _word(part: Key) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream keys must be non-negative, got {part}")
    return int(part)


def stream(seed: int, *parts: Key) -> np.random.Generator:
    """
    Build a generator for (seed, *parts).

    Args:
        seed: run seed
        parts: integers or strings naming the stream

    Returns:
        Independent numpy Generator
    """
    entropy = [_word(seed)] + [_word(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
