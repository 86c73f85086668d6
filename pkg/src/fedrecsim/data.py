"""Rating ingestion and per-client dataset construction.

Raw ratings are binarized to implicit feedback: every record counts as a
positive interaction regardless of its rating value. Each user keeps one
held-out item for evaluation, the rest become training positives, and q
negatives per positive are sampled from the user's non-interacted items.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .seeding import TAG_NEGATIVES, rng_for

log = logging.getLogger(__name__)


@dataclass
class RatingRecord:
    user: int
    item: int
    rating: float
    timestamp: int | None = None


def load_ratings(
    source: str | Path | TextIO | Iterable[str], separator: str = "\t"
) -> tuple[list[RatingRecord], dict[str, int], dict[str, int]]:
    """Parse delimiter-separated rating rows into records with dense ids.

    Each row is user<sep>item<sep>rating[<sep>timestamp]. Raw user and item
    ids are remapped to 0-based dense indices in order of first appearance.
    Returns (records, user_id_map, item_id_map) with maps keyed by the raw
    id token.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_ratings(fh, separator)
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    records: list[RatingRecord] = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split(separator)
        if len(parts) not in (3, 4):
            raise ValueError(f"line {lineno}: expected 3 or 4 fields, got {len(parts)}")
        u_raw, i_raw = parts[0].strip(), parts[1].strip()
        try:
            rating = float(parts[2])
        except ValueError:
            raise ValueError(f"line {lineno}: rating {parts[2]!r} is not a number") from None
        ts: int | None = None
        if len(parts) == 4:
            try:
                ts = int(parts[3])
            except ValueError:
                raise ValueError(f"line {lineno}: timestamp {parts[3]!r} is not an integer") from None
        if not u_raw or not i_raw:
            raise ValueError(f"line {lineno}: empty user or item id")
        u = user_map.setdefault(u_raw, len(user_map))
        i = item_map.setdefault(i_raw, len(item_map))
        records.append(RatingRecord(u, i, rating, ts))
    if not records:
        raise ValueError("no rating records found in input")
    return records, user_map, item_map


@dataclass
class UserData:
    """One client's local data after the leave-one-out split."""

    positives: set[int]
    negatives: list[int]
    holdout: int


@dataclass
class InteractionDataset:
    """Per-user implicit-feedback datasets, the only data a client sees."""

    num_users: int
    num_items: int
    q: int
    seed: int
    users: dict[int, UserData] = field(default_factory=dict)

    @property
    def client_ids(self) -> list[int]:
        return sorted(self.users)

    def mean_profile_len(self) -> float:
        return float(np.mean([len(u.positives) for u in self.users.values()]))

    def to_json(self) -> str:
        """Canonical serialization (byte-equal for identical builds)."""
        payload = {
            "format_version": 1,
            "num_users": self.num_users,
            "num_items": self.num_items,
            "q": self.q,
            "seed": self.seed,
            "users": {
                str(uid): {
                    "positives": sorted(ud.positives),
                    "negatives": list(ud.negatives),
                    "holdout": ud.holdout,
                }
                for uid, ud in sorted(self.users.items())
            },
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "InteractionDataset":
        d = json.loads(text)
        users = {
            int(uid): UserData(set(ud["positives"]), list(ud["negatives"]), ud["holdout"])
            for uid, ud in d["users"].items()
        }
        return cls(d["num_users"], d["num_items"], d["q"], d["seed"], users)


def sample_negatives(
    positives: set[int], count: int, num_items: int, rng: np.random.Generator
) -> list[int]:
    """Draw `count` items the user never interacted with; falls back to
    sampling with replacement when fewer candidates exist."""
    candidates = np.setdiff1d(np.arange(num_items), sorted(positives))
    if candidates.size == 0:
        raise ValueError("user interacted with every item, cannot sample negatives")
    if candidates.size >= count:
        picked = rng.choice(candidates, size=count, replace=False)
    else:
        log.warning("only %d negative candidates for %d requested, sampling with replacement",
                    candidates.size, count)
        picked = rng.choice(candidates, size=count, replace=True)
    return [int(i) for i in picked]


def build_dataset(
    records: list[RatingRecord],
    q: int,
    seed: int,
    num_users: int | None = None,
    num_items: int | None = None,
) -> InteractionDataset:
    """Binarize records and build per-user train/holdout splits.

    The held-out positive is the one with the latest timestamp (last file
    order breaks ties or stands in when timestamps are absent). Users with
    fewer than two distinct positives are dropped with a warning so every
    retained user has both training data and a holdout.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if not records:
        raise ValueError("no records")
    m = num_users if num_users is not None else max(r.user for r in records) + 1
    n = num_items if num_items is not None else max(r.item for r in records) + 1
    # per user: item -> (latest timestamp or -1, last file-order index)
    seen: dict[int, dict[int, tuple[int, int]]] = {}
    for order, rec in enumerate(records):
        if rec.user >= m or rec.item >= n:
            raise ValueError(f"record ({rec.user}, {rec.item}) outside declared shape ({m}, {n})")
        per_user = seen.setdefault(rec.user, {})
        ts = rec.timestamp if rec.timestamp is not None else -1
        prev = per_user.get(rec.item)
        if prev is None or (ts, order) > prev:
            per_user[rec.item] = (ts, order)
    dataset = InteractionDataset(num_users=m, num_items=n, q=q, seed=seed)
    dropped = 0
    for uid in sorted(seen):
        items = seen[uid]
        if len(items) < 2:
            dropped += 1
            continue
        holdout = max(items, key=lambda it: items[it])
        train_pos = set(items) - {holdout}
        rng = rng_for(seed, TAG_NEGATIVES, uid)
        negatives = sample_negatives(set(items), q * len(train_pos), n, rng)
        dataset.users[uid] = UserData(train_pos, negatives, holdout)
    if dropped:
        log.warning("dropped %d users with fewer than 2 positives", dropped)
    if not dataset.users:
        raise ValueError("no user has enough positives to build a dataset")
    return dataset


@dataclass
class PopularityLabels:
    """Per-item popularity class: 2 = high, 1 = medium, 0 = low."""

    classes: np.ndarray
    counts: np.ndarray
    num_classes: int = 3

    HIGH = 2
    MEDIUM = 1
    LOW = 0

    def items_in_class(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.classes == cls)


def assign_popularity_labels(
    records: list[RatingRecord],
    cutoffs: tuple[float, float] = (0.10, 0.45),
    num_items: int | None = None,
) -> PopularityLabels:
    """Split items into high / medium / low popularity by interaction count.

    Items are ranked by descending count (ties broken by ascending index).
    The top ceil(cutoffs[0] * N) items are high so at least one item is high
    for any N >= 1; ranks up to floor(cutoffs[1] * N) are medium; the rest
    are low.
    """
    if not records:
        raise ValueError("no records")
    if not (0.0 < cutoffs[0] < cutoffs[1] < 1.0):
        raise ValueError("cutoffs must be strictly increasing within (0, 1)")
    n = num_items if num_items is not None else max(r.item for r in records) + 1
    counts = np.zeros(n, dtype=np.int64)
    for rec in records:
        counts[rec.item] += 1
    order = np.lexsort((np.arange(n), -counts))  # descending count, index tie-break
    high_n = math.ceil(cutoffs[0] * n)
    mid_boundary = math.floor(cutoffs[1] * n)
    classes = np.zeros(n, dtype=np.int64)
    classes[order[:high_n]] = PopularityLabels.HIGH
    if mid_boundary > high_n:
        classes[order[high_n:mid_boundary]] = PopularityLabels.MEDIUM
    return PopularityLabels(classes=classes, counts=counts)


def select_target_item(labels: PopularityLabels, dataset: InteractionDataset) -> int:
    """The least-popular item: minimum interaction count, lowest index wins."""
    if dataset.num_items != labels.counts.size:
        raise ValueError("labels and dataset disagree on item count")
    if not dataset.users:
        raise ValueError("empty dataset")
    return int(np.argmin(labels.counts))
