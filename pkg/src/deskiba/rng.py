"""Portable random streams.

All randomness goes through numpy's Philox4x64-10 counter-based bit generator
keyed by a :class:`numpy.random.SeedSequence`.  Both are fully specified
algorithms, so a given ``(seed, *path)`` produces the same stream on every
platform.  Child streams are addressed by integer or string path components
instead of being split off a shared parent, which keeps per-sample and
per-image streams independent of processing order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _component(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path integers must be non-negative")
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *path) -> np.random.Generator:
    """Generator for the child stream ``path`` of ``seed``."""
    entropy = [_component(seed), *(_component(p) for p in path)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
