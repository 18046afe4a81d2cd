"""Seed fan-out: one top-level seed, independent streams per named subsystem."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    key = ":".join([str(int(seed))] + [str(x) for x in labels]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def derive_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
