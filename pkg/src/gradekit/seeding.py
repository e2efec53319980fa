"""Named-seed derivation so every random stream is reproducible from config."""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(base: int, *parts) -> int:
    """Deterministic 64-bit seed for a sub-stream identified by ``parts``."""
    h = hashlib.sha256(str(int(base) & MASK64).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))
