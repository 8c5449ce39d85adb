"""Reproducible random streams.

Every stochastic task draws from its own generator, derived from the master
seed and a tuple of integer keys (stage, generation, proposal index, ...).
The derivation is a pure function of its inputs, so results never depend on
how tasks are scheduled across workers.
"""

import numpy as np

RNG_ALGORITHM = "numpy.PCG64+SeedSequence"

# integer tags for the spawn keys of the different stages
STAGE_SIMULATE = 1
STAGE_ABC = 2
STAGE_TUNE = 3
STAGE_CHAIN = 4
STAGE_PREDICTIVE = 5
STAGE_INIT = 6


def substream(seed, *key):
    """Return an independent generator for ``(seed, *key)``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def check_seed(seed):
    """Validate a master seed (non-negative int) or draw a fresh one for ``None``."""
    if seed is None:
        return int(np.random.SeedSequence().entropy % (2**63))
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be a non-negative integer, got {seed!r}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return int(seed)


def as_generator(rng):
    """Accept a Generator, an int seed or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.PCG64(rng))
