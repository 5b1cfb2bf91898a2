"""Named random streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``(seed, name)``.

    The stream name is hashed with CRC32 into the spawn key, so adding a new
    stream never perturbs existing ones.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))
