"""Deterministic seeding: every random draw in the package flows from an explicit seed.

splitmix64 is used to fold string/int tags into derived 64-bit seeds, so independent
random streams (init, data order, sampling, ...) can be split off one master seed
without any hidden global state. Draws themselves come from numpy PCG64 generators.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *tags: int | str) -> int:
    """Stable 64-bit seed derived from a base seed and a sequence of tags."""
    state = int(seed) & _MASK64
    for tag in tags:
        data = tag.encode("utf-8") if isinstance(tag, str) else int(tag).to_bytes(8, "little", signed=False)
        for i in range(0, len(data), 8):
            chunk = int.from_bytes(data[i : i + 8], "little")
            state, _ = splitmix64(state ^ chunk)
    state, out = splitmix64(state)
    return out


def make_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Seeded generator for an independent, named random stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
