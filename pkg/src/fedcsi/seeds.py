"""Deterministic RNG stream derivation.

Every stochastic step in the simulator draws from its own child stream
derived from the experiment master seed plus a purpose label and optional
integer coordinates (round index, station id).  Child streams are
independent, so per-station / per-round work can run in any order, or in
parallel, without changing results.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _encode(part: int | str) -> int:
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(part)


def derive_rng(master_seed: int, *path: int | str) -> np.random.Generator:
    """Child generator for (master_seed, *path), e.g. ("cache", round, sbs)."""
    entropy = [_encode(master_seed)] + [_encode(p) for p in path]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
