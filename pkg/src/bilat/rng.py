"""Seed derivation helpers.

All randomness in the toolkit flows from user-supplied integer seeds through
numpy SeedSequence. Per-example generators are spawned from a shared entropy
tuple keyed by the example's dataset index, so results do not depend on how a
batch is partitioned across workers.
"""
from __future__ import annotations

import hashlib

import numpy as np

Entropy = int | tuple[int, ...]


def _as_entropy_list(entropy: Entropy) -> list[int]:
    if isinstance(entropy, (tuple, list)):
        items = [int(e) for e in entropy]
    else:
        items = [int(entropy)]
    for e in items:
        if e < 0:
            raise ValueError(f"seed entropy must be nonnegative, got {e}")
    return items


def derived_rng(entropy: Entropy) -> np.random.Generator:
    """Generator for a whole-stream purpose (shuffling, center placement)."""
    return np.random.default_rng(np.random.SeedSequence(_as_entropy_list(entropy)))


def example_rng(entropy: Entropy, index: int) -> np.random.Generator:
    """Independent stream for one example, keyed by its dataset index."""
    if index < 0:
        raise ValueError(f"example index must be nonnegative, got {index}")
    seq = np.random.SeedSequence(_as_entropy_list(entropy), spawn_key=(int(index),))
    return np.random.default_rng(seq)


def stable_token(name: str) -> int:
    """Map a string (e.g. an attack name) to a stable nonnegative entropy int."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
