"""Named counter-based random streams.

Every draw in the package comes from a Philox generator keyed by
``(seed, name[, counter])``. Streams with different names are independent,
and a stream can be re-derived at any step without replaying earlier draws.
"""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "fisher_yates"]


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *counter: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1),
                                spawn_key=(_name_key(name), *map(int, counter)))
    return np.random.Generator(np.random.Philox(ss))


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation of ``range(n)`` by the classic backwards Fisher–Yates swap loop."""
    perm = np.arange(n)
    if n < 2:
        return perm
    draws = [int(rng.integers(0, i + 1)) for i in range(n - 1, 0, -1)]
    for i, j in zip(range(n - 1, 0, -1), draws):
        perm[i], perm[j] = perm[j], perm[i]
    return perm
