"""Deterministic RNG derivation from a single master seed.

Every source of randomness in a run (data sampling, masking, weight init,
noise injection, label shuffling, evaluation subsampling) draws from its own
stream derived as ``SeedSequence(master_seed, spawn_key=(purpose, *indices))``
over the Philox counter-based generator. Streams are therefore independent of
each other and of execution order: step 700 of the noise stream is the same
whether or not steps 0..699 were ever drawn.
"""

from __future__ import annotations

import numpy as np

# Stable purpose codes; never renumber, only append.
_PURPOSES = {
    "init": 0,
    "poisson": 1,
    "mask": 2,
    "noise": 3,
    "synth": 4,
    "labels": 5,
    "shot_select": 6,
    "augment": 7,
    "batch": 8,
}


def derive(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return the generator for (master_seed, purpose, indices)."""
    try:
        code = _PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown rng purpose {purpose!r}") from None
    ss = np.random.SeedSequence(master_seed, spawn_key=(code, *indices))
    return np.random.Generator(np.random.Philox(ss))
