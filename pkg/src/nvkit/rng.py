"""Seeded random number generation.

Every source of randomness in the package flows through a seeded
``numpy.random.Generator`` so that runs are reproducible bit for bit.
Worker-style code derives independent child generators from (seed, *keys)
instead of sharing one stream, which keeps augmentation output independent
of iteration order. Keys may be ints or strings; strings are folded to
ints by a fixed cryptographic hash, never by Python's salted ``hash``.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _fold(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    """Create the root generator for a run."""
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Create a child generator keyed by (seed, *keys).

    Distinct key tuples give statistically independent streams, and the
    same tuple always gives the same stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[_fold(k) for k in keys]]))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples re-drawn until they fall within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    mask = np.abs(out) > bound
    while mask.any():
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(out) > bound
    return out.astype(np.float32)
