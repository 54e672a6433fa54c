"""Labelled random substreams.

All randomness in a run flows from one root seed.  Each purpose (parameter
init, epoch shuffling, synthetic data, ...) draws from its own substream so
adding a new consumer never shifts the draws of an existing one.  The label
is hashed with crc32 (stable across processes, unlike ``hash``).
"""

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Return a generator seeded deterministically by (seed, label)."""
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
