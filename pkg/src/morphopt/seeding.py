"""Deterministic seed-stream derivation.

A single experiment seed fans out into independent per-subsystem streams
keyed by a path of labels and counters, so adding or removing parallelism
never shifts which random numbers a given logical unit consumes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _component_to_int(component) -> int:
    if isinstance(component, (int, np.integer)):
        return int(component) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(component).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    """SeedSequence for (seed, *path); path items may be ints or strings."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_component_to_int(c) for c in path]
    return np.random.SeedSequence(entropy)


def rng_for(seed: int, *path) -> np.random.Generator:
    """Independent generator for the stream identified by (seed, *path)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))
