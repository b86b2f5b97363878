"""Replay-exact random streams.

Every stochastic decision (dropout masks, scheduled-sampling coin flips, SpecAugment
mask placement, parameter init, batch shuffles) draws from a generator seeded by
hashing a fixed tuple of integers. No generator is shared between two purposes, so
thread scheduling and evaluation order never change results.
"""

from __future__ import annotations

import numpy as np

# Purpose tags keep streams for different decisions disjoint.
PURPOSE_INIT = 1
PURPOSE_DROPOUT = 2
PURPOSE_SAMPLING = 3
PURPOSE_SPEC_AUGMENT = 4
PURPOSE_SHUFFLE = 5
PURPOSE_STUDENT = 6
PURPOSE_GRADCHECK = 7


def derive_seed(*parts: int) -> int:
    """Hash a tuple of non-negative integers into a 63-bit seed."""
    if any(int(p) < 0 for p in parts):
        raise ValueError("seed parts must be non-negative")
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def derive_rng(*parts: int) -> np.random.Generator:
    """Return a fresh generator seeded by `hash(parts)`."""
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


def student_seed(global_seed: int, student_index: int) -> int:
    """Default per-student seed when the config does not pin one."""
    return derive_seed(global_seed, PURPOSE_STUDENT, student_index)
