"""Synthetic implicit-feedback generator: power-law item popularity with
user preference clusters, written in the supported ratings format."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .seeding import TAG_SYNTH, rng_for

# How much a user's own cluster items are over-weighted relative to the rest.
CLUSTER_AFFINITY = 6.0


def generate_synthetic(
    users: int,
    items: int,
    interactions: int,
    skew: float,
    seed: int,
    out_path: str | Path,
    clusters: int = 5,
) -> int:
    """Write a TSV ratings file (user, item, rating, timestamp).

    Item popularity follows a power law with exponent `skew` (0 = uniform).
    Items are assigned round-robin to `clusters` preference groups and each
    user favors one group, so hold-out ranking is learnable. Every user gets
    an equal share of the interactions (earlier users absorb the remainder),
    sampled without replacement from the user's item distribution. Returns
    the number of rows written.
    """
    if users <= 0 or items <= 0 or interactions <= 0:
        raise ValueError("users, items and interactions must be positive")
    if skew < 0:
        raise ValueError("skew must be >= 0")
    if interactions > users * items:
        raise ValueError(f"cannot place {interactions} interactions among "
                         f"{users} users x {items} items")
    if interactions < 2 * users:
        raise ValueError("need at least 2 interactions per user for a holdout split")
    clusters = max(1, min(clusters, items))

    popularity = (np.arange(items) + 1.0) ** (-skew)
    item_cluster = np.arange(items) % clusters
    rng = rng_for(seed, TAG_SYNTH)

    base, extra = divmod(interactions, users)
    ts = 0
    rows = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for u in range(users):
            count = base + (1 if u < extra else 0)
            weights = popularity * np.where(item_cluster == u % clusters,
                                            CLUSTER_AFFINITY, 1.0)
            weights = weights / weights.sum()
            picked = rng.choice(items, size=count, replace=False, p=weights)
            for item in picked:
                fh.write(f"{u}\t{int(item)}\t5.0\t{ts}\n")
                ts += 1
                rows += 1
    return rows
