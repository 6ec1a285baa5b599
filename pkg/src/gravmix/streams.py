"""Counter-based random streams for reproducible parallel Monte Carlo.

Every consumer of randomness takes an explicit generator; streams are
Philox counters keyed by (seed, stream id), so a run partitioned into
any number of workers draws identical numbers per logical stream.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    key = np.array([seed % (1 << 64), stream_id % (1 << 64)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def substreams(seed: int, n: int, base: int = 0) -> list[np.random.Generator]:
    return [stream(seed, base + i) for i in range(n)]
