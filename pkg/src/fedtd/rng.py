"""Seed derivation for reproducible, order-independent random streams.

Every stream is a Philox (counter-based) generator keyed by a hash of
``(seed, tag, *indices)``. Streams for different tags or indices never
overlap, so adding an agent or a run never shifts anyone else's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, tag: str, *indices) -> int:
    """128-bit integer derived from a parent seed, a purpose tag and indices."""
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((int(seed), str(tag)) + tuple(_canon(i) for i in indices)).encode())
    return int.from_bytes(h.digest(), "little")


def _canon(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    return str(x)


def make_generator(seed: int, tag: str, *indices) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed(seed, tag, *indices)))
