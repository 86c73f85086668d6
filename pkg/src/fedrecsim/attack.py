"""The item-promotion adversary and its baselines.

The main attack crafts deceptive gradient updates for a set of controlled
malicious clients by jointly descending three objectives: an explicit
promotion term (raise the target item's score for each malicious user), a
popularity-obfuscation term (push the target embedding into the region a
frozen popularity classifier calls high-popularity), and a distance term
(keep crafted updates close to the mean of the malicious clients' genuine
updates so they blend in with benign traffic).

Also here: the explicit-boosting baseline (the same crafting with the extra
terms disabled) and the classic data-poisoning baselines that fill fake
profiles with popular or random items.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, PopularityLabels, sample_negatives
from .kernel import (
    MLPParams,
    clamp_prob,
    mlp_backward,
    mlp_forward,
    sgd_apply,
    sigmoid,
    softmax,
)
from .model import (
    GlobalParams,
    GradientUpdate,
    LocalClientState,
    flat_to_update,
    flatten_global,
    item_row_slice,
    local_loss_and_grads,
    local_training_pass,
    unflatten_global,
    update_to_flat,
)
from .seeding import TAG_ESTIMATOR, TAG_POISON, rng_for

log = logging.getLogger(__name__)

ATTACK_MODES = ("none", "pipattack", "eb", "pa", "ra")

# Hidden sizes of the popularity estimator tower; the final layer emits one
# logit per popularity class.
ESTIMATOR_HIDDEN = (32, 16, 8)


@dataclass
class AdversaryConfig:
    """Everything the adversary is allowed to know and tune."""

    mode: str
    target_item: int
    malicious_ids: list[int]
    alpha: float = 0.0            # weight of the popularity-obfuscation term
    gamma: float = 0.0            # weight of the distance term
    craft_epochs: int = 30
    craft_lr: float = 0.01
    p_norm: float = 2.0
    fillers: int | None = None    # fake profile length for pa / ra; None = mean benign

    def __post_init__(self):
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be nonnegative")
        if self.p_norm <= 1.0:
            raise ValueError("p_norm must be > 1")


@dataclass
class PopularityEstimator:
    """Frozen classifier mapping an item embedding to popularity-class
    probabilities."""

    net: MLPParams
    num_classes: int
    top_class: int
    frozen: bool = True

    def predict_proba(self, embeddings: np.ndarray) -> np.ndarray:
        logits, _ = mlp_forward(self.net, np.atleast_2d(embeddings))
        return softmax(logits)

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        return self.predict_proba(embeddings).argmax(axis=1)


def estimator_loss_and_grads(net: MLPParams, x: np.ndarray, labels: np.ndarray):
    """Summed softmax cross-entropy over (embedding, class) pairs."""
    logits, cache = mlp_forward(net, x)
    probs = softmax(logits)
    picked = clamp_prob(probs[np.arange(len(labels)), labels])
    loss = float(-np.log(picked).sum())
    upstream = probs.copy()
    upstream[np.arange(len(labels)), labels] -= 1.0
    grads, input_grad = mlp_backward(net, cache, upstream)
    return loss, grads, input_grad


def train_popularity_estimator(
    item_embeddings: np.ndarray,
    labels: PopularityLabels,
    target: int,
    seed: int,
    items: np.ndarray | None = None,
    epochs: int = 400,
    lr: float = 0.05,
    batch_size: int = 32,
) -> PopularityEstimator:
    """Fit the popularity classifier on (embedding, label) pairs.

    The target item is always excluded from the training pairs. `items`
    restricts training to a subset (used to hold out a test split); by
    default every non-target item is used. The returned estimator is frozen.
    """
    n, d = item_embeddings.shape
    if items is None:
        items = np.arange(n)
    items = np.asarray([i for i in items if i != target], dtype=np.int64)
    y = labels.classes[items]
    c = labels.num_classes
    if np.unique(y).size < c:
        raise ValueError(f"need all {c} popularity classes present to train the estimator")
    rng = rng_for(seed, TAG_ESTIMATOR)
    sizes = [d, *ESTIMATOR_HIDDEN, c]
    # He-style scaled init; the shared-model Gaussian(0, 1) convention is not
    # imposed on the adversary's own network
    weights = [rng.normal(0.0, np.sqrt(2.0 / sizes[k]), size=(sizes[k + 1], sizes[k]))
               for k in range(len(sizes) - 1)]
    biases = [np.zeros(sizes[k + 1]) for k in range(len(sizes) - 1)]
    net = MLPParams(weights, biases, ["relu"] * len(ESTIMATOR_HIDDEN) + ["linear"])
    x_all = item_embeddings[items]
    for _ in range(epochs):
        order = rng.permutation(items.size)
        for start in range(0, items.size, batch_size):
            sel = order[start:start + batch_size]
            _, grads, _ = estimator_loss_and_grads(net, x_all[sel], y[sel])
            net = sgd_apply(net, grads.scaled(1.0 / sel.size), lr)
    return PopularityEstimator(net=net, num_classes=c, top_class=PopularityLabels.HIGH)


# ---------------------------------------------------------------------------
# Attack losses
# ---------------------------------------------------------------------------

def promotion_loss(states: list[LocalClientState], target: int) -> float:
    """Explicit promotion: -sum over malicious users of log p(user, target)."""
    total = 0.0
    for state in states:
        x = np.concatenate([state.user_embedding, state.shared.item_embeddings[target]])
        y, _ = mlp_forward(state.shared.ffn, x)
        p = clamp_prob(sigmoid(float(state.shared.projection @ y)))
        total -= float(np.log(p))
    return total


def popularity_loss(estimator: PopularityEstimator, target_embedding: np.ndarray) -> float:
    """Negative log-likelihood of the top popularity class for the target."""
    if not estimator.frozen:
        raise ValueError("estimator must be frozen before it steers the attack")
    probs = estimator.predict_proba(target_embedding)[0]
    return float(-np.log(clamp_prob(probs[estimator.top_class])))


def popularity_loss_grad(
    estimator: PopularityEstimator, target_embedding: np.ndarray
) -> tuple[float, np.ndarray]:
    """popularity_loss plus its gradient w.r.t. the target embedding."""
    logits, cache = mlp_forward(estimator.net, np.atleast_2d(target_embedding))
    probs = softmax(logits)
    loss = float(-np.log(clamp_prob(probs[0, estimator.top_class])))
    upstream = probs.copy()
    upstream[0, estimator.top_class] -= 1.0
    _, input_grad = mlp_backward(estimator.net, cache, upstream)
    return loss, input_grad[0]


def distance_loss(
    crafted: list[np.ndarray], genuine: list[np.ndarray], p: float = 2.0
) -> float:
    """Sum over malicious users of ||crafted_i - mean(genuine)||_p on
    flattened shared-parameter updates."""
    for c, g in zip(crafted, genuine):
        if c.shape != g.shape:
            raise ValueError("crafted and genuine update shapes do not match")
    center = np.mean(genuine, axis=0)
    return float(sum(np.linalg.norm(c - center, ord=p) for c in crafted))


def _pnorm_grad(diff: np.ndarray, p: float) -> tuple[float, np.ndarray]:
    """||diff||_p and d||diff||_p / d diff, with a zero gradient at the
    non-differentiable origin."""
    if p == 2.0:
        nrm = float(np.linalg.norm(diff))
        if nrm < 1e-12:
            return nrm, np.zeros_like(diff)
        return nrm, diff / nrm
    nrm = float(np.linalg.norm(diff, ord=p))
    if nrm < 1e-12:
        return nrm, np.zeros_like(diff)
    return nrm, np.sign(diff) * (np.abs(diff) / nrm) ** (p - 1.0)


def joint_loss_and_grad(
    config: AdversaryConfig,
    shared_template: GlobalParams,
    estimator: PopularityEstimator | None,
    theta0: np.ndarray,
    genuine_center: np.ndarray,
    eta: float,
    uid: int,
    theta: np.ndarray,
    u: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """One malicious client's joint objective and its analytic gradient.

    Returns (loss, d loss / d theta, d loss / d user embedding) where theta
    is the flat shared-parameter vector of the client's adversarial copy.
    The distance term contributes its subgradient here; the craft loop
    instead applies it as a proximal step, which optimizes the same
    objective but stays stable for any gamma.
    """
    params = unflatten_global(theta, shared_template)
    v_slice = item_row_slice(shared_template, config.target_item)
    grad = np.zeros_like(theta)

    state = LocalClientState(uid, u, params)
    loss_exp, upd_exp, du = local_loss_and_grads(
        state, np.array([config.target_item]), np.array([1.0]))
    grad += update_to_flat(upd_exp, shared_template)

    loss_pop = 0.0
    if config.alpha > 0:
        loss_pop, dv = popularity_loss_grad(estimator, theta[v_slice])
        grad[v_slice] += config.alpha * dv

    loss_dis = 0.0
    if config.gamma > 0:
        crafted = (theta0 - theta) / eta
        loss_dis, ddiff = _pnorm_grad(crafted - genuine_center, config.p_norm)
        grad += config.gamma * (-1.0 / eta) * ddiff

    total = loss_exp + config.alpha * loss_pop + config.gamma * loss_dis
    return total, grad, du


# ---------------------------------------------------------------------------
# Deceptive gradient crafting
# ---------------------------------------------------------------------------

@dataclass
class CraftResult:
    updates: dict[int, GradientUpdate]
    user_embeddings: dict[int, np.ndarray]   # adversarial private embeddings to persist
    loss_curves: dict[int, list[float]]
    fallbacks: list[int] = field(default_factory=list)


def craft_gradients(
    config: AdversaryConfig,
    shared: GlobalParams,
    estimator: PopularityEstimator | None,
    user_embeddings: dict[int, np.ndarray],
    genuine_updates: dict[int, GradientUpdate],
    eta: float,
    client_ids: list[int] | None = None,
) -> CraftResult:
    """Craft one deceptive update per malicious client.

    Each client starts from the downloaded shared snapshot plus its private
    user embedding and runs `craft_epochs` steps of gradient descent on the
    joint objective, updating the shared copy and the user embedding. The
    emitted update is (downloaded - adversarial) / eta over shared
    parameters, so one averaged server step moves the global model toward
    the adversarial optimum. A client whose loss turns non-finite falls back
    to its genuine update.
    """
    if config.alpha > 0 and estimator is None:
        raise ValueError("popularity term requires a trained estimator")
    ids = sorted(client_ids if client_ids is not None else config.malicious_ids)
    theta0 = flatten_global(shared)
    genuine_flat = {uid: update_to_flat(genuine_updates[uid], shared)
                    for uid in config.malicious_ids}
    genuine_center = np.mean([genuine_flat[uid] for uid in sorted(genuine_flat)], axis=0)
    v_slice = item_row_slice(shared, config.target_item)
    d = shared.dim

    result = CraftResult({}, {}, {})
    # shrinkage applied per craft step by the proximal handling of the
    # distance term, expressed in update (gradient) space
    shrink_step = config.craft_lr * config.gamma / (eta * eta)
    for uid in ids:
        theta = theta0.copy()
        u = user_embeddings[uid].copy()
        curve: list[float] = []
        failed = False
        for _ in range(config.craft_epochs):
            params = unflatten_global(theta, shared)
            grad = np.zeros_like(theta)

            # explicit promotion: cross-entropy of the (user, target) pair at label 1
            state = LocalClientState(uid, u, params)
            loss_exp, upd_exp, du = local_loss_and_grads(
                state, np.array([config.target_item]), np.array([1.0]))
            grad += update_to_flat(upd_exp, shared)

            # popularity obfuscation: gradient flows into the target embedding row
            loss_pop = 0.0
            if config.alpha > 0:
                loss_pop, dv = popularity_loss_grad(estimator, theta[v_slice])
                grad[v_slice] += config.alpha * dv

            loss_dis = 0.0
            if config.gamma > 0:
                crafted = (theta0 - theta) / eta
                loss_dis = float(np.linalg.norm(crafted - genuine_center, ord=config.p_norm))

            total = loss_exp + config.alpha * loss_pop + config.gamma * loss_dis
            if not np.isfinite(total):
                failed = True
                break
            curve.append(total)
            theta -= config.craft_lr * grad
            u -= config.craft_lr * du

            # distance term: proximal (shrinkage) step toward the genuine-mean
            # update. A plain subgradient step has constant magnitude
            # gamma/eta, which oscillates without converging once gamma is
            # large; the prox step minimizes the same objective and simply
            # moves the crafted update toward the center by at most
            # shrink_step, collapsing onto it exactly when gamma dominates.
            if config.gamma > 0 and config.p_norm == 2.0:
                crafted = (theta0 - theta) / eta
                diff = crafted - genuine_center
                nrm = float(np.linalg.norm(diff))
                if nrm > 1e-12:
                    scale = min(shrink_step, nrm) / nrm
                    theta += eta * scale * diff
            elif config.gamma > 0:
                crafted = (theta0 - theta) / eta
                _, ddiff = _pnorm_grad(crafted - genuine_center, config.p_norm)
                theta -= config.craft_lr * config.gamma * (-1.0 / eta) * ddiff

        if failed or not np.all(np.isfinite(theta)):
            log.warning("craft for client %d hit a non-finite loss, submitting genuine update", uid)
            result.updates[uid] = genuine_updates[uid]
            result.fallbacks.append(uid)
            continue
        result.updates[uid] = flat_to_update((theta0 - theta) / eta, shared)
        result.user_embeddings[uid] = u
        result.loss_curves[uid] = curve
    return result


def explicit_boosting(
    config: AdversaryConfig,
    shared: GlobalParams,
    user_embeddings: dict[int, np.ndarray],
    genuine_updates: dict[int, GradientUpdate],
    eta: float,
    client_ids: list[int] | None = None,
) -> CraftResult:
    """Baseline: craft with only the promotion objective (alpha = gamma = 0)."""
    eb = AdversaryConfig(
        mode="eb", target_item=config.target_item, malicious_ids=config.malicious_ids,
        alpha=0.0, gamma=0.0, craft_epochs=config.craft_epochs, craft_lr=config.craft_lr,
        p_norm=config.p_norm)
    return craft_gradients(eb, shared, None, user_embeddings, genuine_updates, eta, client_ids)


# ---------------------------------------------------------------------------
# Data-poisoning baselines
# ---------------------------------------------------------------------------

@dataclass
class PoisonedProfile:
    """Replacement local data for one malicious client."""

    train_items: list[int]    # fake positives, may contain repeats
    negatives: list[int]


def data_poison_profiles(
    mode: str,
    config: AdversaryConfig,
    dataset: InteractionDataset,
    labels: PopularityLabels,
    seed: int,
) -> dict[int, PoisonedProfile]:
    """Fake interaction profiles for the pa / ra baselines.

    Each malicious client's data becomes the target item plus `fillers`
    items, drawn from the high-popularity class (pa) or uniformly at random
    (ra). Negatives are resampled at the dataset's ratio. The clients then
    train genuinely on this poisoned data.
    """
    if mode not in ("pa", "ra"):
        raise ValueError("data poisoning mode must be 'pa' or 'ra'")
    n = dataset.num_items
    fillers = config.fillers
    if fillers is None:
        fillers = max(0, int(round(dataset.mean_profile_len())) - 1)
    if mode == "pa":
        pool = np.array([i for i in labels.items_in_class(PopularityLabels.HIGH)
                         if i != config.target_item], dtype=np.int64)
    else:
        pool = np.array([i for i in range(n) if i != config.target_item], dtype=np.int64)
    if pool.size == 0:
        raise ValueError("no candidate filler items")
    profiles: dict[int, PoisonedProfile] = {}
    for uid in sorted(config.malicious_ids):
        rng = rng_for(seed, TAG_POISON, uid)
        if fillers <= pool.size:
            picked = rng.choice(pool, size=fillers, replace=False)
        else:
            log.warning("client %d: %d fillers requested from %d candidates, "
                        "sampling with replacement", uid, fillers, pool.size)
            picked = rng.choice(pool, size=fillers, replace=True)
        train_items = [config.target_item] + [int(i) for i in picked]
        positives = set(train_items)
        negatives = sample_negatives(positives, dataset.q * len(train_items), n, rng)
        profiles[uid] = PoisonedProfile(train_items, negatives)
    return profiles


# ---------------------------------------------------------------------------
# Round-level adversary driver
# ---------------------------------------------------------------------------

@dataclass
class Adversary:
    """Holds attack state across rounds: the frozen estimator once trained,
    poisoned profiles for the data-poisoning baselines."""

    config: AdversaryConfig
    estimator: PopularityEstimator | None = None
    poisoned: dict[int, PoisonedProfile] | None = None
    activated: bool = False

    @property
    def is_model_poisoning(self) -> bool:
        return self.config.mode in ("pipattack", "eb")

    def activate(
        self,
        shared: GlobalParams,
        dataset: InteractionDataset,
        labels: PopularityLabels,
        estimator_seed: int,
        poison_seed: int,
        estimator_epochs: int = 400,
        estimator_lr: float = 0.05,
        estimator_batch: int = 32,
    ) -> None:
        """One-time attack setup at the configured start epoch.

        Trains the popularity estimator on the current global item embeddings
        (pipattack) or builds the fake profiles (pa / ra). Idempotent given
        identical inputs, which makes checkpoint resume deterministic.
        """
        if self.config.mode == "pipattack" and self.estimator is None:
            self.estimator = train_popularity_estimator(
                shared.item_embeddings, labels, self.config.target_item, estimator_seed,
                epochs=estimator_epochs, lr=estimator_lr, batch_size=estimator_batch)
        if self.config.mode in ("pa", "ra") and self.poisoned is None:
            self.poisoned = data_poison_profiles(
                self.config.mode, self.config, dataset, labels, poison_seed)
        self.activated = True

    def craft(
        self,
        shared: GlobalParams,
        user_embeddings: dict[int, np.ndarray],
        genuine_updates: dict[int, GradientUpdate],
        eta: float,
        client_ids: list[int],
    ) -> CraftResult:
        if self.config.mode == "eb":
            return explicit_boosting(self.config, shared, user_embeddings,
                                     genuine_updates, eta, client_ids)
        return craft_gradients(self.config, shared, self.estimator, user_embeddings,
                               genuine_updates, eta, client_ids)
