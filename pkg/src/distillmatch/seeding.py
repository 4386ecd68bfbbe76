"""Deterministic seed derivation for named random substreams.

Every source of randomness in a run (task split, batch sampling, augmentation,
weight init, detector splits, coreset eviction, ...) gets its own child seed
derived from the run seed plus a short tag, so adding or reordering one
consumer never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 64-bit child seed from a tuple of ints/strings.

    Uses sha256 rather than Python's ``hash`` so values are identical across
    processes and interpreter restarts.
    """
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    """numpy Generator seeded from :func:`derive_seed` of the parts."""
    return np.random.default_rng(derive_seed(*parts))
