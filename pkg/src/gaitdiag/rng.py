"""Seeding. All randomness is Philox (a counter-based 64-bit generator), and
each pipeline stage draws from a named sub-seed of one top-level seed."""

import hashlib

import numpy as np


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed, *names) -> int:
    """Stable 63-bit sub-seed for ``names`` under ``seed``."""
    key = ":".join([str(int(seed)), *map(str, names)]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
