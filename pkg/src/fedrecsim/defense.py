"""Server-side aggregation rules: plain averaging, coordinate-wise trimmed
mean, and Bulyan with Krum scoring as its selection primitive.

All rules operate on flattened update vectors. Sparse item-embedding rows are
densified per round over the union of rows touched by any participant, with
absent rows treated as zero gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import MLPGrads
from .model import GlobalParams, GradientUpdate

RULES = ("mean", "trimmed_mean", "bulyan")


class AggregationInfeasible(Exception):
    """Raised when a rule's participant-count precondition fails."""


@dataclass
class FlatUpdates:
    """Participant updates densified over the union of touched item rows."""

    matrix: np.ndarray        # (n_participants, dim)
    rows: list[int]           # item indices backing the leading columns
    template: GlobalParams

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def flatten_updates(updates: list[GradientUpdate], template: GlobalParams) -> FlatUpdates:
    rows = sorted({i for u in updates for i in u.item_rows})
    d = template.dim
    row_pos = {item: k for k, item in enumerate(rows)}
    tail_size = (sum(w.size for w in template.ffn.weights)
                 + sum(b.size for b in template.ffn.biases)
                 + template.projection.size)
    mat = np.zeros((len(updates), len(rows) * d + tail_size))
    for r, u in enumerate(updates):
        for item, grad in u.item_rows.items():
            k = row_pos[item]
            mat[r, k * d:(k + 1) * d] = grad
        mat[r, len(rows) * d:] = np.concatenate(
            [w.ravel() for w in u.ffn.weights]
            + [b.ravel() for b in u.ffn.biases]
            + [u.projection]
        )
    return FlatUpdates(mat, rows, template)


def unflatten_aggregate(vec: np.ndarray, flat: FlatUpdates) -> GradientUpdate:
    d = flat.template.dim
    item_rows = {item: vec[k * d:(k + 1) * d].copy() for k, item in enumerate(flat.rows)}
    off = len(flat.rows) * d
    weights, biases = [], []
    for w in flat.template.ffn.weights:
        weights.append(vec[off:off + w.size].reshape(w.shape).copy())
        off += w.size
    for b in flat.template.ffn.biases:
        biases.append(vec[off:off + b.size].copy())
        off += b.size
    return GradientUpdate(item_rows, MLPGrads(weights, biases), vec[off:].copy())


def mean_aggregate(vectors: np.ndarray) -> np.ndarray:
    if vectors.shape[0] == 0:
        raise AggregationInfeasible("no updates to aggregate")
    return vectors.mean(axis=0)


def trimmed_mean(vectors: np.ndarray, beta: int) -> np.ndarray:
    """Coordinate-wise: drop the beta largest and beta smallest values, then
    average the remaining n - 2*beta."""
    n = vectors.shape[0]
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if n <= 2 * beta:
        raise AggregationInfeasible(f"trimmed mean needs n > 2*beta, got n={n}, beta={beta}")
    if beta == 0:
        return vectors.mean(axis=0)
    ordered = np.sort(vectors, axis=0)
    return ordered[beta:n - beta].mean(axis=0)


def _pairwise_sq_dists(vectors: np.ndarray) -> np.ndarray:
    sq = (vectors * vectors).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (vectors @ vectors.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def krum_scores(vectors: np.ndarray, f: int) -> np.ndarray:
    """Krum score per participant: the sum of squared distances to its
    n - f - 2 nearest other vectors. Lower means more trusted."""
    n = vectors.shape[0]
    if f < 0:
        raise ValueError("f must be >= 0")
    if n < f + 3:
        raise AggregationInfeasible(f"krum needs n >= f + 3, got n={n}, f={f}")
    d2 = _pairwise_sq_dists(vectors)
    return _scores_from_dists(d2, np.arange(n), n - f - 2)


def _scores_from_dists(d2: np.ndarray, active: np.ndarray, neighbors: int) -> np.ndarray:
    """Krum scores restricted to `active` indices of a full distance matrix."""
    sub = d2[np.ix_(active, active)]
    m = active.size
    neighbors = max(0, min(neighbors, m - 1))
    if neighbors == 0:
        return np.zeros(m)
    ordered = np.sort(sub, axis=1)
    # column 0 is the zero self-distance
    return ordered[:, 1:neighbors + 1].sum(axis=1)


def bulyan(vectors: np.ndarray, f: int) -> np.ndarray:
    """Two-stage robust aggregation.

    Stage 1 selects n - 2f vectors by repeatedly taking the Krum-minimal one
    (scores recomputed on the remaining set, ties to the lowest index).
    Stage 2 averages, per coordinate, the n - 4f values closest to the
    coordinate-wise median of the selected set (distance ties break toward
    the smaller value). Participant order only matters when two selection
    scores tie to within float rounding.
    """
    n = vectors.shape[0]
    if f < 0:
        raise ValueError("f must be >= 0")
    if n < 4 * f + 3:
        raise AggregationInfeasible(f"bulyan needs n >= 4*f + 3, got n={n}, f={f}")
    d2 = _pairwise_sq_dists(vectors)
    active = np.arange(n)
    selected: list[int] = []
    for _ in range(n - 2 * f):
        scores = _scores_from_dists(d2, active, active.size - f - 2)
        pick = active[int(np.argmin(scores))]   # argmin keeps the lowest index on ties
        selected.append(pick)
        active = active[active != pick]
    sel = vectors[np.array(selected)]
    med = np.median(sel, axis=0)
    keep = n - 4 * f
    # order each coordinate by (|value - median|, value): value-sort first,
    # then a stable distance-sort, so ties never depend on participant order
    value_order = np.argsort(sel, axis=0, kind="stable")
    by_value = np.take_along_axis(sel, value_order, axis=0)
    dist_order = np.argsort(np.abs(by_value - med), axis=0, kind="stable")
    closest = np.take_along_axis(by_value, dist_order, axis=0)[:keep]
    return closest.mean(axis=0)


def aggregate(
    updates: list[GradientUpdate],
    template: GlobalParams,
    rule: str,
    trim_count: int = 0,
    byzantine_count: int = 0,
) -> tuple[GradientUpdate, float]:
    """Apply the configured rule; returns the aggregate and its L2 norm."""
    if rule not in RULES:
        raise ValueError(f"unknown aggregation rule {rule!r}")
    flat = flatten_updates(updates, template)
    if rule == "mean":
        agg = mean_aggregate(flat.matrix)
    elif rule == "trimmed_mean":
        agg = trimmed_mean(flat.matrix, trim_count)
    else:
        agg = bulyan(flat.matrix, byzantine_count)
    return unflatten_aggregate(agg, flat), float(np.linalg.norm(agg))
