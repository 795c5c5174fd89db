"""Deterministic RNG derivation so every consumer gets an independent stream."""

from __future__ import annotations

import numpy as np


def derived_rng(*parts: int) -> np.random.Generator:
    """Independent generator keyed by an integer path (seed, stream, index...)."""
    return np.random.default_rng(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]))


def derived_seed(*parts: int) -> int:
    """Stable 63-bit seed for torch generators, keyed like derived_rng."""
    state = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2)
    return int((int(state[0]) << 31) ^ int(state[1]))
