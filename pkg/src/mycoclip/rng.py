"""Seed derivation for order-independent generation.

Every image gets its own 64-bit seed mixed from the master seed and its
coordinates, and a Philox (counter-based) generator keyed by that seed.
"""

from __future__ import annotations

import numpy as np


def derive_seed(master_seed: int, *coords: int) -> int:
    """Mix ``master_seed`` and integer coordinates into a 64-bit seed."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, *(int(c) for c in coords)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
