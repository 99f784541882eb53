"""Seeded, counter-based random streams."""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Philox generator for ``seed`` and an optional path of stream keys.

    Keys may be ints or strings; strings are hashed with crc32 so that the
    derived stream does not depend on Python's per-process hash salt.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def beta_sample(rng: np.random.Generator, alpha: float, beta: float, size=None):
    """Draw mixing coefficients from Beta(alpha, beta)."""
    if not (alpha > 0 and beta > 0):
        raise ValueError(f"Beta shape parameters must be positive, got ({alpha}, {beta})")
    return rng.beta(alpha, beta, size=size)


def derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random permutation with no fixed points (n >= 2)."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    # a random cyclic shift of a random ordering never maps an element to itself
    order = rng.permutation(n)
    shift = int(rng.integers(1, n))
    perm = np.empty(n, dtype=np.int64)
    perm[order] = order[(np.arange(n) + shift) % n]
    return perm
