"""Attack-efficacy and recommendation-quality metrics.

Exposure rate: fraction of evaluated users whose top-K list contains the
promoted target. Hit ratio: fraction whose held-out item appears in their
top-K. Both rank every item the user has not trained on (training positives
are masked out, the holdout stays in). Evaluation covers benign users only;
adversary-controlled clients would trivially inflate the exposure rate.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PopularityLabels
from .defense import flatten_updates
from .model import GlobalParams, GradientUpdate, LocalClientState, score_logits_batch

log = logging.getLogger(__name__)


@dataclass
class MetricRow:
    """One evaluated epoch of the run log."""

    epoch: int
    er_at_k: float
    hr_at_k: float
    kl: float | None
    f1: float | None
    aggregate_norm: float

    CSV_COLUMNS = ("epoch", "er_at_k", "hr_at_k", "kl", "f1", "aggregate_norm")

    def csv_values(self) -> list[str]:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, int):
                return str(x)
            return f"{x:.10g}"
        return [fmt(v) for v in (self.epoch, self.er_at_k, self.hr_at_k,
                                 self.kl, self.f1, self.aggregate_norm)]


def score_matrix(
    shared: GlobalParams, user_embeddings: np.ndarray, chunk: int = 64
) -> np.ndarray:
    """Pre-sigmoid scores for every (user, item) pair, shape (m, N).

    The first tower layer splits across the concatenated input, so the
    per-item half is computed once and broadcast over users.
    """
    d = shared.dim
    n = shared.num_items
    w1 = shared.ffn.weights[0]
    b1 = shared.ffn.biases[0]
    item_part = shared.item_embeddings @ w1[:, d:].T         # (N, h1)
    m = user_embeddings.shape[0]
    out = np.empty((m, n))
    for start in range(0, m, chunk):
        users = user_embeddings[start:start + chunk]
        user_part = users @ w1[:, :d].T                      # (c, h1)
        h = np.maximum(user_part[:, None, :] + item_part[None, :, :] + b1, 0.0)
        h = h.reshape(-1, h.shape[-1])
        for w, b, act in zip(shared.ffn.weights[1:], shared.ffn.biases[1:],
                             shared.ffn.activations[1:]):
            h = h @ w.T + b
            if act == "relu":
                np.maximum(h, 0.0, out=h)
            elif act != "linear":
                raise ValueError(f"unsupported activation {act!r} in fused scorer")
        out[start:start + chunk] = (h @ shared.projection).reshape(users.shape[0], n)
    return out


def ranking_order(logits: np.ndarray, masked: list[np.ndarray]) -> np.ndarray:
    """Per-user item ranking, best first, with training positives pushed to
    the end. Ties break toward the lower item index, matching
    recommend_top_k."""
    work = logits.copy()
    for i, excl in enumerate(masked):
        if excl.size:
            work[i, excl] = -np.inf
    return np.argsort(-work, axis=1, kind="stable")   # stable: index tie-break


def top_k_membership(
    logits: np.ndarray, k: int, masked: list[np.ndarray]
) -> np.ndarray:
    """Boolean (m, N): item is among the user's top-k candidates."""
    order = ranking_order(logits, masked)
    member = np.zeros(logits.shape, dtype=bool)
    rows = np.repeat(np.arange(logits.shape[0]), k)
    member[rows, order[:, :k].ravel()] = True
    # masked items can only enter when fewer than k candidates exist
    for i, excl in enumerate(masked):
        if excl.size:
            member[i, excl] = False
    return member


@dataclass
class EvalClient:
    """What the evaluator needs to know about one user."""

    user_id: int
    user_embedding: np.ndarray
    train_positives: set[int]
    holdout: int | None


def _eval_arrays(clients: list[EvalClient]) -> tuple[np.ndarray, list[np.ndarray]]:
    emb = np.stack([c.user_embedding for c in clients])
    masks = [np.fromiter(sorted(c.train_positives), dtype=np.int64, count=len(c.train_positives))
             for c in clients]
    return emb, masks


def exposure_rate(
    shared: GlobalParams, clients: list[EvalClient], k: int, target: int
) -> float:
    """Fraction of users whose top-k recommendations include the target."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not clients:
        raise ValueError("no users to evaluate")
    emb, masks = _eval_arrays(clients)
    member = top_k_membership(score_matrix(shared, emb), k, masks)
    return float(member[:, target].mean())


def hit_ratio(shared: GlobalParams, clients: list[EvalClient], k: int) -> float:
    """Fraction of users whose held-out item appears in their top-k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    usable = [c for c in clients if c.holdout is not None]
    skipped = len(clients) - len(usable)
    if skipped:
        log.warning("skipping %d users without a holdout item", skipped)
    if not usable:
        raise ValueError("no users with a holdout item")
    emb, masks = _eval_arrays(usable)
    member = top_k_membership(score_matrix(shared, emb), k, masks)
    hits = member[np.arange(len(usable)), [c.holdout for c in usable]]
    return float(hits.mean())


def evaluate_round(
    shared: GlobalParams, clients: list[EvalClient], er_k: int, hr_k: int, target: int
) -> tuple[float, float]:
    """Exposure rate and hit ratio from one shared score matrix and sort."""
    emb, masks = _eval_arrays(clients)
    order = ranking_order(score_matrix(shared, emb), masks)
    target_masked = np.array([target in c.train_positives for c in clients])
    er_hits = (order[:, :er_k] == target).any(axis=1) & ~target_masked
    er = float(er_hits.mean())
    usable = [i for i, c in enumerate(clients) if c.holdout is not None]
    holdouts = np.array([clients[i].holdout for i in usable])
    hr_hits = (order[usable, :hr_k] == holdouts[:, None]).any(axis=1)
    hr = float(hr_hits.mean())
    return er, hr


def classifier_f1(predictions: np.ndarray, truth: np.ndarray, num_classes: int = 3) -> float:
    """Macro-averaged F1; a class absent from both sides contributes 0."""
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    scores = []
    for c in range(num_classes):
        tp = int(((predictions == c) & (truth == c)).sum())
        fp = int(((predictions == c) & (truth != c)).sum())
        fn = int(((predictions != c) & (truth == c)).sum())
        denom = 2 * tp + fp + fn
        if denom == 0:
            log.warning("class %d absent from the evaluation split, scoring it 0", c)
            scores.append(0.0)
        else:
            scores.append(2 * tp / denom)
    return float(np.mean(scores))


def grad_kl_divergence(
    benign: list[GradientUpdate],
    malicious: list[GradientUpdate],
    template: GlobalParams,
    bins: int = 50,
) -> float:
    """KL(benign || malicious) between the two sides' averaged-update value
    distributions.

    Each side is averaged into one flat vector over a common parameter space
    (union of touched item rows plus the dense tail), histogrammed over the
    shared [min, max] range with equal-width bins and add-one smoothing.
    """
    if not benign or not malicious:
        raise ValueError("need at least one update on each side")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    flat = flatten_updates(list(benign) + list(malicious), template)
    b = flat.matrix[: len(benign)].mean(axis=0)
    m = flat.matrix[len(benign):].mean(axis=0)
    lo = min(b.min(), m.min())
    hi = max(b.max(), m.max())
    if hi == lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    cb = np.histogram(b, bins=edges)[0] + 1.0
    cm = np.histogram(m, bins=edges)[0] + 1.0
    pb = cb / cb.sum()
    pm = cm / cm.sum()
    return float((pb * np.log(pb / pm)).sum())


def export_item_embeddings(
    path: str | Path,
    shared: GlobalParams,
    labels: PopularityLabels,
    target: int,
) -> None:
    """CSV of item_id, popularity_class, is_target and the embedding values,
    the input contract for external projection plots."""
    d = shared.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "popularity_class", "is_target"]
                        + [f"e{j}" for j in range(d)])
        for i in range(shared.num_items):
            writer.writerow(
                [i, int(labels.classes[i]), int(i == target)]
                + [f"{x:.10g}" for x in shared.item_embeddings[i]])
