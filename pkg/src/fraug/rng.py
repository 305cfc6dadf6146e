"""Named, platform-independent random streams.

Every stream is a ``numpy.random.Generator`` over the counter-based Philox
bit generator, keyed by a ``SeedSequence`` built from the global seed and a
path of labels, e.g. ``stream(7, "client", 2, "data")``. Streams with
different paths are statistically independent, so drawing from one never
shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
