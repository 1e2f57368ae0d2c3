"""Named random sub-streams fanned out from a single top-level seed."""

import zlib

import numpy as np

STREAMS = ("init", "dropout", "folds", "synthetic", "shuffle")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for consumer ``name``.

    Each consumer gets its own ``SeedSequence`` entropy so that drawing more
    numbers from one stream never shifts another.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, extra)]))
