"""Seed splitting: every consumer gets its own stream keyed by (seed, name)."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` derived from the run seed.

    The key is ``crc32(name)`` so streams do not depend on call order.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))
