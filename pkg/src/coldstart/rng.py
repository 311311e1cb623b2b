"""Seeded random streams shared by every stochastic component."""

import numpy as np


def philox(seed) -> np.random.Generator:
    """The package's named PRNG: numpy ``Generator`` over ``Philox(seed)``.

    ``seed`` is an int or a tuple of ints (hashed through ``SeedSequence``).
    """
    if isinstance(seed, (tuple, list)):
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(s) for s in seed])))
    return np.random.Generator(np.random.Philox(int(seed)))
