"""Named, seed-derived random substreams.

Every consumer of randomness asks for a generator by ``(seed, name)``; the
name is hashed into the seed sequence so streams never collide and adding a
new consumer does not perturb existing ones.
"""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "noise", "simplex", "shuffle")


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream_id(name), *extra])))
