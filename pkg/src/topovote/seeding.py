"""Labeled seed derivation: one master seed, stable per-task streams."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *labels) -> int:
    """Derive a child seed from a master seed and a sequence of labels.

    The derivation is a SHA-256 over a canonical string, so it is stable
    across runs, platforms and process boundaries (unlike ``hash()``).
    """
    key = "topovote|" + str(int(master_seed)) + "|" + "|".join(str(x) for x in labels)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def spawn_rng(master_seed: int, *labels) -> np.random.Generator:
    """Generator seeded from a labeled derivation of the master seed."""
    return np.random.default_rng(derive_seed(master_seed, *labels))
