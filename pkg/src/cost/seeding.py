"""Deterministic seed derivation.

Every stage of the pipeline draws its randomness from a single top-level
seed, re-keyed by a fixed stage label so that stages can be rerun
independently without perturbing each other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Derive a 63-bit child seed from ``seed`` and a stage label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    """Seeded generator, optionally re-keyed by ``label``."""
    if label is not None:
        seed = derive_seed(seed, label)
    return np.random.default_rng(seed)
