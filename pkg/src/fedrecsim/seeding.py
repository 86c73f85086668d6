"""Deterministic RNG derivation.

Every random draw in a run comes from a generator derived here from one of
the three top-level seeds (data, model, rounds) plus integer tags, so any
round can be recomputed in isolation: no generator state is carried across
rounds.
"""
from __future__ import annotations

import numpy as np

# Tags namespacing the seed streams. Values are arbitrary but frozen: changing
# them changes every seeded run.
TAG_NEGATIVES = 1
TAG_SYNTH = 2
TAG_MODEL_INIT = 3
TAG_USER_INIT = 4
TAG_SAMPLING = 5
TAG_LOCAL_PASS = 6
TAG_MALICIOUS_PICK = 7
TAG_ESTIMATOR = 8
TAG_POISON = 9
TAG_RESAMPLE = 10


def rng_for(*keys: int) -> np.random.Generator:
    """A fresh Generator keyed by an integer tuple (order matters)."""
    return np.random.default_rng(np.random.SeedSequence(list(keys)))
