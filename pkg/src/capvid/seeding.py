"""Deterministic sub-seed derivation.

Every run takes a single integer seed; independent random streams are
derived by hashing a string label into the seed sequence, so adding a
new consumer of randomness does not perturb existing streams.
"""
from __future__ import annotations

import hashlib

import numpy as np


def seed_sequence(seed: int, label: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return np.random.SeedSequence([seed, int.from_bytes(digest[:16], "little")])


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Return a PCG64 generator for the (seed, label) stream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, label)))
