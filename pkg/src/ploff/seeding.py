"""Named deterministic RNG substreams.

Every command takes a single integer seed; the pieces that need randomness
(data collection, parameter init, batch sampling, evaluation, ...) each draw
from their own named substream so that adding randomness in one place never
perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Return a Generator for (seed, label), independent across labels."""
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def worker_count(default: int = 1) -> int:
    """Worker cap from the PLOFF_THREADS env var (>= 1)."""
    import os

    raw = os.environ.get("PLOFF_THREADS", "")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        return default
    return max(1, n)
