"""Named random sub-streams derived from a single run seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_seed(seed: int, name: str) -> int:
    """A 32-bit seed for the named component, independent of the other streams."""
    ss = np.random.SeedSequence([int(seed), stream_key(name)])
    return int(ss.generate_state(1)[0])


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream_key(name)])
