"""Stable seed derivation: every random stream hangs off one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *key) -> int:
    """64-bit seed from ``master_seed`` and a tuple of ints/strings (process-independent)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode())
    for part in key:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(master_seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *key))
