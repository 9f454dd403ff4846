"""Seed derivation and raw random draws.

Only the raw 64-bit output of numpy's PCG64 bit generator is used, never
``Generator`` methods, so datasets do not depend on numpy's distribution
code staying unchanged between releases.
"""

from __future__ import annotations

import numpy as np

PRNG_NAME = "PCG64/random_raw+splitmix64"

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def split_mix(master_seed: int, index: int) -> int:
    """Child seed number ``index`` of ``master_seed`` (stable, 64-bit)."""
    return splitmix64((master_seed ^ splitmix64(index & _MASK)) & _MASK)


def raw_stream(seed: int, count: int) -> np.ndarray:
    return np.random.PCG64(seed & _MASK).random_raw(count).astype(np.uint64)


def bounded(raw: np.ndarray, bound: int) -> np.ndarray:
    """Map raw 64-bit draws to [0, bound) using the top 32 bits (bound < 2**32)."""
    if not 0 < bound <= 1 << 32:
        raise ValueError(f"bound must be in (0, 2**32], got {bound}")
    return ((raw >> np.uint64(32)) * np.uint64(bound)) >> np.uint64(32)


def unit_open_closed(raw: np.ndarray) -> np.ndarray:
    """Map raw 64-bit draws to (0, 1] with 53-bit resolution."""
    return ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


def permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates shuffle of ``range(n)`` driven by raw draws."""
    perm = np.arange(n)
    if n < 2:
        return perm
    raw = raw_stream(seed, n - 1)
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = int(bounded(raw[step : step + 1], i + 1)[0])
        perm[i], perm[j] = perm[j], perm[i]
    return perm
