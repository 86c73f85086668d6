"""The server-client protocol: per-round client sampling, local gradient
collection, pluggable aggregation, and the global update.

One epoch = one federated round (a sampling plus one aggregation step).
User embeddings never cross the client boundary: every submitted update is
schema-checked against the wire format before the server touches it.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attack import Adversary
from .data import InteractionDataset, PopularityLabels, sample_negatives
from .defense import aggregate
from .metrics import EvalClient, MetricRow, evaluate_round, grad_kl_divergence
from .model import (
    GlobalParams,
    GradientUpdate,
    assert_wire_schema,
    local_training_pass,
)
from .seeding import TAG_LOCAL_PASS, TAG_RESAMPLE, TAG_SAMPLING, rng_for

log = logging.getLogger(__name__)


@dataclass
class RoundConfig:
    """Per-round knobs handed to run_round."""

    t: int
    fraction: float
    eta: float
    rule: str
    seed: int                      # per-round seed, all rng streams derive from it
    batch_size: int = 64
    assumed_malicious_fraction: float = 0.0   # defender's beta = f = round(frac * n)
    force_include_malicious: bool = False
    resample_negatives: bool = False
    compute_kl: bool = False
    kl_bins: int = 50
    threads: int = 1

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError("fraction must be in (0, 1]")
        if self.eta <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class RoundReport:
    t: int
    participants: list[int]
    aggregate_norm: float
    kl: float | None = None
    craft_fallbacks: list[int] = field(default_factory=list)


@dataclass
class ClientRecord:
    """Persistent per-client simulation state."""

    user_id: int
    user_embedding: np.ndarray
    train_items: list[int]        # positives used for training (repeats allowed)
    negatives: list[int]
    holdout: int | None


def sample_clients(client_ids: list[int], fraction: float, seed: int) -> list[int]:
    """Uniform sample without replacement of round(fraction * M) clients,
    deterministic per seed, returned in ascending id order."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    size = int(round(fraction * len(client_ids)))
    rng = rng_for(seed, TAG_SAMPLING)
    picked = rng.choice(np.asarray(client_ids, dtype=np.int64), size=size, replace=False)
    return sorted(int(i) for i in picked)


def _client_pass(
    client: ClientRecord,
    shared: GlobalParams,
    cfg: RoundConfig,
    dataset: InteractionDataset,
) -> tuple[GradientUpdate, np.ndarray]:
    negatives = client.negatives
    if cfg.resample_negatives:
        rng = rng_for(cfg.seed, TAG_RESAMPLE, client.user_id)
        negatives = sample_negatives(
            set(client.train_items) | ({client.holdout} if client.holdout is not None else set()),
            dataset.q * len(client.train_items), dataset.num_items, rng)
    rng = rng_for(cfg.seed, TAG_LOCAL_PASS, client.user_id)
    update, new_u, _ = local_training_pass(
        shared, client.user_embedding, client.train_items, negatives,
        cfg.eta, cfg.batch_size, rng)
    return update, new_u


def run_round(
    shared: GlobalParams,
    clients: dict[int, ClientRecord],
    cfg: RoundConfig,
    dataset: InteractionDataset,
    adversary: Adversary | None = None,
    traffic_recorder: Callable[[int, dict], None] | None = None,
) -> tuple[GlobalParams, RoundReport]:
    """One federated round.

    Sampled benign clients (and malicious ones while the attack is inactive)
    submit genuine updates from their local pass; active malicious clients
    submit crafted updates. The server schema-checks all payloads, aggregates
    with the configured rule and applies theta <- theta - eta * aggregate.
    Sampled clients persist their locally updated user embeddings.
    """
    sampled = sample_clients(sorted(clients), cfg.fraction, cfg.seed)
    attack_on = adversary is not None and adversary.activated and adversary.config.mode != "none"
    malicious = set(adversary.config.malicious_ids) if adversary is not None else set()
    if attack_on and cfg.force_include_malicious:
        sampled = sorted(set(sampled) | malicious)

    crafted_ids: list[int] = []
    genuine_ids = list(sampled)
    if attack_on and adversary.is_model_poisoning:
        crafted_ids = [i for i in sampled if i in malicious]
        genuine_ids = [i for i in sampled if i not in malicious]

    def pass_for(uid: int) -> tuple[GradientUpdate, np.ndarray]:
        return _client_pass(clients[uid], shared, cfg, dataset)

    updates: dict[int, GradientUpdate] = {}
    new_embeddings: dict[int, np.ndarray] = {}
    if cfg.threads > 1 and len(genuine_ids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for uid, (upd, new_u) in zip(genuine_ids, pool.map(pass_for, genuine_ids)):
                updates[uid] = upd
                new_embeddings[uid] = new_u
    else:
        for uid in genuine_ids:
            updates[uid], new_embeddings[uid] = pass_for(uid)

    fallbacks: list[int] = []
    if crafted_ids:
        # the distance term references the mean genuine update over the whole
        # malicious cohort, so every controlled client runs a scratch benign
        # pass first (its real embedding is not advanced by this simulation)
        genuine_malicious = {uid: _client_pass(clients[uid], shared, cfg, dataset)[0]
                             for uid in sorted(malicious)}
        craft = adversary.craft(
            shared,
            {uid: clients[uid].user_embedding for uid in sorted(malicious)},
            genuine_malicious,
            cfg.eta,
            crafted_ids,
        )
        for uid in crafted_ids:
            updates[uid] = craft.updates[uid]
            if uid in craft.user_embeddings:
                new_embeddings[uid] = craft.user_embeddings[uid]
        fallbacks = craft.fallbacks

    ordered = sorted(updates)
    payloads = [updates[uid] for uid in ordered]
    for uid, upd in zip(ordered, payloads):
        wire = upd.to_wire()
        assert_wire_schema(wire)
        if traffic_recorder is not None:
            traffic_recorder(uid, wire)

    defended = int(round(cfg.assumed_malicious_fraction * len(payloads)))
    agg, agg_norm = aggregate(payloads, shared, cfg.rule,
                              trim_count=defended, byzantine_count=defended)

    kl = None
    if cfg.compute_kl and crafted_ids and genuine_ids:
        kl = grad_kl_divergence([updates[u] for u in genuine_ids],
                                [updates[u] for u in crafted_ids],
                                shared, bins=cfg.kl_bins)

    new_shared = shared.copy()
    for item, row in agg.item_rows.items():
        new_shared.item_embeddings[item] -= cfg.eta * row
    for w, gw in zip(new_shared.ffn.weights, agg.ffn.weights):
        w -= cfg.eta * gw
    for b, gb in zip(new_shared.ffn.biases, agg.ffn.biases):
        b -= cfg.eta * gb
    new_shared.projection -= cfg.eta * agg.projection

    for uid, new_u in new_embeddings.items():
        clients[uid].user_embedding = new_u

    return new_shared, RoundReport(cfg.t, list(sampled), agg_norm, kl, fallbacks)


@dataclass
class Simulation:
    """Owns the federated state and runs the training schedule."""

    dataset: InteractionDataset
    labels: PopularityLabels
    shared: GlobalParams
    clients: dict[int, ClientRecord]
    adversary: Adversary | None
    target_item: int
    eta: float
    fraction: float
    batch_size: int
    rule: str = "mean"
    assumed_malicious_fraction: float = 0.0
    attack_start_epoch: int | None = None
    round_seed: int = 0
    er_k: int = 5
    hr_k: int = 10
    eval_every: int = 1
    force_include_malicious: bool = False
    resample_negatives: bool = False
    compute_kl: bool = True
    threads: int = 1
    estimator_epochs: int = 400
    estimator_lr: float = 0.05
    estimator_batch: int = 32
    estimator_seed: int = 0
    poison_seed: int = 0

    def eval_clients(self) -> list[EvalClient]:
        """Benign-user evaluation population in ascending id order."""
        malicious = set(self.adversary.config.malicious_ids) if self.adversary else set()
        out = []
        for uid in sorted(self.clients):
            if uid in malicious:
                continue
            c = self.clients[uid]
            out.append(EvalClient(uid, c.user_embedding, set(c.train_items), c.holdout))
        return out

    def _maybe_activate(self, t: int) -> None:
        if (self.adversary is None or self.adversary.activated
                or self.adversary.config.mode == "none"):
            return
        if self.attack_start_epoch is None or t < self.attack_start_epoch:
            return
        self.adversary.activate(
            self.shared, self.dataset, self.labels, self.estimator_seed, self.poison_seed,
            estimator_epochs=self.estimator_epochs, estimator_lr=self.estimator_lr,
            estimator_batch=self.estimator_batch)
        if self.adversary.poisoned is not None:
            for uid, profile in self.adversary.poisoned.items():
                self.clients[uid].train_items = list(profile.train_items)
                self.clients[uid].negatives = list(profile.negatives)
                self.clients[uid].holdout = None
        log.info("attack mode %s activated at epoch %d", self.adversary.config.mode, t)

    def round_config(self, t: int) -> RoundConfig:
        attack_on = (self.adversary is not None and self.adversary.activated
                     and self.adversary.config.mode != "none")
        return RoundConfig(
            t=t, fraction=self.fraction, eta=self.eta, rule=self.rule,
            seed=_round_seed(self.round_seed, t), batch_size=self.batch_size,
            assumed_malicious_fraction=self.assumed_malicious_fraction,
            force_include_malicious=self.force_include_malicious,
            resample_negatives=self.resample_negatives,
            compute_kl=self.compute_kl and attack_on,
            threads=self.threads,
        )

    def train(
        self,
        rounds: int,
        start_round: int = 0,
        on_round: Callable[[RoundReport, MetricRow | None], None] | None = None,
        traffic_recorder: Callable[[int, dict], None] | None = None,
    ) -> list[MetricRow]:
        """Run rounds [start_round, rounds); returns the metric time series.

        Metrics are evaluated every `eval_every` rounds and always on the
        final round. `on_round` fires after every round (report plus the
        metric row when evaluated), which is where the runner hangs CSV and
        checkpoint IO.
        """
        series: list[MetricRow] = []
        for t in range(start_round, rounds):
            self._maybe_activate(t)
            cfg = self.round_config(t)
            self.shared, report = run_round(
                self.shared, self.clients, cfg, self.dataset,
                self.adversary, traffic_recorder)
            row = None
            if t % self.eval_every == 0 or t == rounds - 1:
                er, hr = evaluate_round(self.shared, self.eval_clients(),
                                        self.er_k, self.hr_k, self.target_item)
                row = MetricRow(epoch=t, er_at_k=er, hr_at_k=hr, kl=report.kl,
                                f1=None, aggregate_norm=report.aggregate_norm)
                series.append(row)
            if on_round is not None:
                on_round(report, row)
        return series


def _round_seed(base: int, t: int) -> int:
    # fold the round index into the seed stream; SeedSequence keys are
    # per-call anyway, this keeps each round independently recomputable
    return base * 1_000_003 + t
