"""Deterministic derivation of named random sub-streams from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def subseed(seed: int, label: str) -> int:
    """Derive a stable 63-bit seed for the sub-stream named ``label``.

    The derivation is a SHA-256 hash of the master seed and the label, so it is
    reproducible across processes and platforms and two distinct labels give
    independent streams.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Generator for the sub-stream named ``label`` under ``seed``."""
    return np.random.default_rng(subseed(seed, label))
