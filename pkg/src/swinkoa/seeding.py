"""Named random sub-streams derived from one master seed."""
import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. ``"init"``, ``"shuffle"``).

    The stream name is hashed with CRC32, which is stable across processes
    and Python versions, unlike ``hash()``.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8")), *[int(e) for e in extra]]
    return np.random.default_rng(np.random.SeedSequence(key))
