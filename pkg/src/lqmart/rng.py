"""Splittable random streams.

Every random draw descends from one 64-bit seed through
:class:`numpy.random.SeedSequence`, and generators use the counter-based
Philox bit generator, so per-instance and per-path substreams can be
derived independently without shared state.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream addressed by ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in path))
    return np.random.Generator(np.random.Philox(ss))


def instance_streams(seed: int, n: int, *prefix: int) -> list[np.random.Generator]:
    """One independent generator per instance index ``0 .. n-1``."""
    return [stream(seed, *prefix, i) for i in range(n)]
