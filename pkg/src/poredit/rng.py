"""Splittable deterministic random streams.

Every consumer of randomness derives an independent stream from a
(seed, purpose-tag, step) key, so noise fields are reproducible across
platforms and independent of call order. Same key => same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def stream(seed: int, tag: str, step: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, tag, step); Philox for cross-platform stability."""
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _tag_hash(tag), int(step) & 0xFFFFFFFFFFFFFFFF])
    return np.random.Generator(np.random.Philox(key))


def normal_field(seed: int, tag: str, step: int, shape) -> np.ndarray:
    """Standard-normal field as a pure function of the key and shape."""
    return stream(seed, tag, step).standard_normal(shape)
