"""Neural collaborative-filtering recommender split into shared and private
parameters.

Shared (server-visible) state: the item embedding table, the feedforward
tower and the output projection vector. Private state: one embedding per
user, which never leaves the client. A user-item score is
sigmoid(projection . tower(user_emb ++ item_emb)).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernel import (
    MLPGrads,
    MLPParams,
    clamp_prob,
    flatten_mlp,
    mlp_backward,
    mlp_forward,
    sigmoid,
    unflatten_mlp,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# Key set of the wire format a client submits each round. Kept in one place
# so the schema assertion and the serializer cannot drift apart.
WIRE_FIELDS = ("item_rows", "ffn_weights", "ffn_biases", "projection")


@dataclass
class GlobalParams:
    """Shared model state published by the server each round."""

    item_embeddings: np.ndarray   # (N, d)
    ffn: MLPParams                # input dim 2d
    projection: np.ndarray        # (d_L,) output projection, no bias

    def __post_init__(self):
        if self.ffn.input_dim != 2 * self.dim:
            raise ValueError("tower input dim must be twice the embedding dim")
        if self.projection.shape != (self.ffn.output_dim,):
            raise ValueError("projection length must match tower output dim")

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.item_embeddings.shape[1]

    def copy(self) -> "GlobalParams":
        return GlobalParams(self.item_embeddings.copy(), self.ffn.copy(), self.projection.copy())


@dataclass
class LocalClientState:
    """A client's view during one round: its private embedding plus a copy
    of the published shared parameters."""

    user_id: int
    user_embedding: np.ndarray    # (d,), never serialized into updates
    shared: GlobalParams


@dataclass
class GradientUpdate:
    """Shared-parameter gradients a client submits; sparse over item rows.

    Structurally incapable of carrying user embeddings: the wire schema has
    exactly the fields in WIRE_FIELDS.
    """

    item_rows: dict[int, np.ndarray]
    ffn: MLPGrads
    projection: np.ndarray

    def to_wire(self) -> dict:
        """JSON-serializable payload, the exact bytes the server sees."""
        return {
            "item_rows": {str(i): row.tolist() for i, row in sorted(self.item_rows.items())},
            "ffn_weights": [w.tolist() for w in self.ffn.weights],
            "ffn_biases": [b.tolist() for b in self.ffn.biases],
            "projection": self.projection.tolist(),
        }


def assert_wire_schema(payload: dict) -> None:
    """Reject any round payload whose key set differs from the wire schema."""
    if tuple(sorted(payload)) != tuple(sorted(WIRE_FIELDS)):
        raise ValueError(f"unexpected update payload fields: {sorted(payload)}")


def init_global_params(
    num_items: int,
    dim: int,
    tower: tuple[int, ...],
    rng: np.random.Generator,
    sigma: float = 1.0,
    scheme: str = "scaled",
    embed_sigma: float | None = None,
) -> GlobalParams:
    """Gaussian-initialized shared parameters (mean 0).

    scheme "scaled": embeddings use embed_sigma, layer weights are divided
    by sqrt(fan_in) and biases start at zero, keeping initial scores in the
    live region of the sigmoid. scheme "gaussian": plain sigma everywhere;
    at this scale it saturates the output and sigmoid + cross-entropy
    gradients vanish to exactly zero within a few rounds, so it is kept only
    as a reference setting.
    """
    if scheme not in ("scaled", "gaussian"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    sizes = [2 * dim, *tower]
    if scheme == "gaussian":
        weights = [rng.normal(0.0, sigma, size=(sizes[k + 1], sizes[k]))
                   for k in range(len(tower))]
        biases = [rng.normal(0.0, sigma, size=sizes[k + 1]) for k in range(len(tower))]
        projection_sigma = sigma
        embed_sigma = sigma
    else:
        weights = [rng.normal(0.0, sigma / np.sqrt(sizes[k]), size=(sizes[k + 1], sizes[k]))
                   for k in range(len(tower))]
        biases = [np.zeros(sizes[k + 1]) for k in range(len(tower))]
        projection_sigma = sigma / np.sqrt(tower[-1])
        if embed_sigma is None:
            embed_sigma = 0.1
    ffn = MLPParams(weights, biases, ["relu"] * len(tower))
    items = rng.normal(0.0, embed_sigma, size=(num_items, dim))
    projection = rng.normal(0.0, projection_sigma, size=tower[-1])
    return GlobalParams(items, ffn, projection)


def init_user_embeddings(
    num_users: int, dim: int, rng: np.random.Generator, sigma: float = 1.0
) -> np.ndarray:
    return rng.normal(0.0, sigma, size=(num_users, dim))


def score_logit(state: LocalClientState, item: int) -> float:
    """Pre-sigmoid ranking score for one user-item pair."""
    x = np.concatenate([state.user_embedding, state.shared.item_embeddings[item]])
    y, _ = mlp_forward(state.shared.ffn, x)
    return float(state.shared.projection @ y)


def score(state: LocalClientState, item: int) -> float:
    """Predicted interaction probability in [0, 1] for one item."""
    if not 0 <= item < state.shared.num_items:
        raise ValueError(f"item {item} out of range")
    return float(sigmoid(score_logit(state, item)))


def score_logits_batch(state: LocalClientState, items: np.ndarray) -> np.ndarray:
    """Pre-sigmoid scores for many items of one user."""
    items = np.asarray(items, dtype=np.int64)
    v = state.shared.item_embeddings[items]
    x = np.concatenate([np.broadcast_to(state.user_embedding, v.shape), v], axis=1)
    y, _ = mlp_forward(state.shared.ffn, x)
    return y @ state.shared.projection


def local_loss_and_grads(
    state: LocalClientState, items: np.ndarray, labels: np.ndarray
) -> tuple[float, GradientUpdate, np.ndarray]:
    """Cross-entropy loss and gradients for one batch of (item, label) pairs.

    Loss is the summed binary cross-entropy -sum(r log p + (1-r) log(1-p))
    with probabilities clamped before the log. Returns the loss, shared
    gradients (item rows touched by the batch, tower, projection) and,
    separately, the private user-embedding gradient which is never uploaded.
    """
    items = np.asarray(items, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.float64)
    d = state.shared.dim
    if items.size == 0:
        return 0.0, GradientUpdate({}, MLPGrads.zeros_like(state.shared.ffn),
                                   np.zeros_like(state.shared.projection)), np.zeros(d)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    v = state.shared.item_embeddings[items]
    x = np.concatenate([np.broadcast_to(state.user_embedding, v.shape), v], axis=1)
    y, cache = mlp_forward(state.shared.ffn, x)
    z = y @ state.shared.projection
    p = sigmoid(z)
    pc = clamp_prob(p)
    loss = float(-(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)).sum())
    # d loss / d z for sigmoid + cross-entropy; the clamp only guards the log.
    dz = p - labels
    proj_grad = y.T @ dz
    dy = np.outer(dz, state.shared.projection)
    ffn_grads, dx = mlp_backward(state.shared.ffn, cache, dy)
    user_grad = dx[:, :d].sum(axis=0)
    dv = dx[:, d:]
    item_rows: dict[int, np.ndarray] = {}
    for idx in np.unique(items):
        item_rows[int(idx)] = dv[items == idx].sum(axis=0)
    return loss, GradientUpdate(item_rows, ffn_grads, proj_grad), user_grad


def recommend_top_k(
    state: LocalClientState, k: int, excluded: set[int] | np.ndarray
) -> list[int]:
    """The k highest-scoring items outside `excluded`, best first.

    Ranks by the pre-sigmoid score (sigmoid is monotone, so the order equals
    the probability order without saturation ties); equal scores break
    toward the lower item index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = state.shared.num_items
    candidates = np.setdiff1d(np.arange(n), np.fromiter(excluded, dtype=np.int64, count=-1)
                              if not isinstance(excluded, np.ndarray) else excluded)
    if candidates.size == 0:
        return []
    if candidates.size < k:
        log.warning("only %d candidates for top-%d request", candidates.size, k)
        k = candidates.size
    logits = score_logits_batch(state, candidates)
    order = np.lexsort((candidates, -logits))
    return [int(i) for i in candidates[order[:k]]]


# ---------------------------------------------------------------------------
# Flat views over the shared parameter space. Layout: item embedding rows in
# index order, then tower weights, then tower biases, then the projection.
# ---------------------------------------------------------------------------

def flatten_global(params: GlobalParams) -> np.ndarray:
    return np.concatenate([params.item_embeddings.ravel(),
                           flatten_mlp(params.ffn),
                           params.projection])


def unflatten_global(vec: np.ndarray, template: GlobalParams) -> GlobalParams:
    n, d = template.item_embeddings.shape
    items = vec[: n * d].reshape(n, d).copy()
    off = n * d
    mlp_size = sum(w.size for w in template.ffn.weights) + sum(b.size for b in template.ffn.biases)
    ffn = unflatten_mlp(vec[off: off + mlp_size], template.ffn)
    off += mlp_size
    projection = vec[off:].copy()
    if projection.size != template.projection.size:
        raise ValueError("flat vector length does not match template")
    return GlobalParams(items, ffn, projection)


def item_row_slice(template: GlobalParams, item: int) -> slice:
    d = template.dim
    return slice(item * d, (item + 1) * d)


def shared_tail_offset(template: GlobalParams) -> int:
    """Flat offset where the tower + projection block starts."""
    return template.num_items * template.dim


def update_to_flat(update: GradientUpdate, template: GlobalParams) -> np.ndarray:
    """Densify a sparse update over the full shared parameter space."""
    vec = np.zeros(flatten_global(template).size)
    for item, row in update.item_rows.items():
        vec[item_row_slice(template, item)] = row
    off = shared_tail_offset(template)
    # flatten_mlp orders all weights then all biases; rebuild identically
    vec[off:] = np.concatenate(
        [w.ravel() for w in update.ffn.weights]
        + [b.ravel() for b in update.ffn.biases]
        + [update.projection]
    )
    return vec


def flat_to_update(vec: np.ndarray, template: GlobalParams, tol: float = 0.0) -> GradientUpdate:
    """Inverse of update_to_flat; item rows with all-|entries| <= tol are dropped."""
    n, d = template.item_embeddings.shape
    rows = vec[: n * d].reshape(n, d)
    item_rows = {int(i): rows[i].copy() for i in np.flatnonzero(np.abs(rows).max(axis=1) > tol)}
    off = n * d
    mlp_size = sum(w.size for w in template.ffn.weights) + sum(b.size for b in template.ffn.biases)
    mlp = unflatten_mlp(vec[off: off + mlp_size], template.ffn)
    ffn = MLPGrads(mlp.weights, mlp.biases)
    projection = vec[off + mlp_size:].copy()
    return GradientUpdate(item_rows, ffn, projection)


# ---------------------------------------------------------------------------
# Benign local training
# ---------------------------------------------------------------------------

def local_training_pass(
    shared: GlobalParams,
    user_embedding: np.ndarray,
    train_items: list[int],
    negatives: list[int],
    eta: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[GradientUpdate, np.ndarray, float]:
    """One full pass of local SGD over a client's data.

    Shuffles positives and negatives together, steps through batches updating
    a private copy of the shared parameters and the user embedding, and
    returns the submitted update (downloaded - trained) / eta restricted to
    shared parameters, the new user embedding, and the summed loss.
    """
    items = np.array(list(train_items) + list(negatives), dtype=np.int64)
    labels = np.concatenate([np.ones(len(train_items)), np.zeros(len(negatives))])
    order = rng.permutation(items.size)
    items, labels = items[order], labels[order]

    local = shared.copy()
    u = user_embedding.copy()
    touched: set[int] = set()
    total_loss = 0.0
    for start in range(0, items.size, batch_size):
        bi = items[start: start + batch_size]
        bl = labels[start: start + batch_size]
        state = LocalClientState(-1, u, local)
        loss, upd, user_grad = local_loss_and_grads(state, bi, bl)
        total_loss += loss
        for item, row in upd.item_rows.items():
            local.item_embeddings[item] -= eta * row
            touched.add(item)
        for w, gw in zip(local.ffn.weights, upd.ffn.weights):
            w -= eta * gw
        for b, gb in zip(local.ffn.biases, upd.ffn.biases):
            b -= eta * gb
        local.projection -= eta * upd.projection
        u -= eta * user_grad

    item_rows = {i: (shared.item_embeddings[i] - local.item_embeddings[i]) / eta
                 for i in sorted(touched)}
    ffn = MLPGrads(
        [(w0 - w1) / eta for w0, w1 in zip(shared.ffn.weights, local.ffn.weights)],
        [(b0 - b1) / eta for b0, b1 in zip(shared.ffn.biases, local.ffn.biases)],
    )
    projection = (shared.projection - local.projection) / eta
    return GradientUpdate(item_rows, ffn, projection), u, total_loss


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    round_index: int,
    params: GlobalParams,
    user_ids: list[int],
    user_embeddings: np.ndarray,
    estimator_net: MLPParams | None = None,
) -> None:
    """Versioned binary dump of shared parameters plus per-user embeddings."""
    arrays: dict[str, np.ndarray] = {
        "version": np.array(CHECKPOINT_VERSION),
        "round_index": np.array(round_index),
        "item_embeddings": params.item_embeddings,
        "projection": params.projection,
        "user_ids": np.asarray(user_ids, dtype=np.int64),
        "user_embeddings": user_embeddings,
        "ffn_meta": np.frombuffer(json.dumps(params.ffn.activations).encode(), dtype=np.uint8),
    }
    for k, w in enumerate(params.ffn.weights):
        arrays[f"ffn_w{k}"] = w
    for k, b in enumerate(params.ffn.biases):
        arrays[f"ffn_b{k}"] = b
    if estimator_net is not None:
        arrays["est_meta"] = np.frombuffer(
            json.dumps(estimator_net.activations).encode(), dtype=np.uint8)
        for k, w in enumerate(estimator_net.weights):
            arrays[f"est_w{k}"] = w
        for k, b in enumerate(estimator_net.biases):
            arrays[f"est_b{k}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    round_index: int
    params: GlobalParams
    user_ids: list[int]
    user_embeddings: np.ndarray
    estimator_net: MLPParams | None


def _load_mlp(npz, prefix: str, meta_key: str) -> MLPParams:
    activations = json.loads(bytes(npz[meta_key]).decode())
    weights, biases = [], []
    for k in range(len(activations)):
        weights.append(npz[f"{prefix}_w{k}"])
        biases.append(npz[f"{prefix}_b{k}"])
    return MLPParams(weights, biases, activations)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path) as npz:
        version = int(npz["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        ffn = _load_mlp(npz, "ffn", "ffn_meta")
        params = GlobalParams(npz["item_embeddings"].copy(), ffn, npz["projection"].copy())
        estimator = _load_mlp(npz, "est", "est_meta") if "est_meta" in npz else None
        return Checkpoint(
            round_index=int(npz["round_index"]),
            params=params,
            user_ids=[int(i) for i in npz["user_ids"]],
            user_embeddings=npz["user_embeddings"].copy(),
            estimator_net=estimator,
        )
