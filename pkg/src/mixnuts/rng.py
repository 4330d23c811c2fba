"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator keyed by a
``SeedSequence`` over integer tuples. ``stream(seed, example_id, restart)``
therefore gives every (example, restart) pair its own independent stream, and
adding restarts or examples never perturbs the streams that already existed.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def stream(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed), *(int(k) for k in keys)]
    if any(v < 0 for v in entropy):
        raise InvalidInputError("seeds and stream keys must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
