"""Experiment orchestration: wire the config into a simulation, run it, and
write every artifact (resolved config, metrics CSV, checkpoints, embedding
exports) to the output directory."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import Adversary, AdversaryConfig, PopularityEstimator
from .config import ConfigError, ExperimentConfig, write_resolved
from .data import (
    InteractionDataset,
    PopularityLabels,
    assign_popularity_labels,
    build_dataset,
    load_ratings,
    select_target_item,
)
from .federation import ClientRecord, Simulation
from .metrics import MetricRow, export_item_embeddings
from .model import (
    Checkpoint,
    init_global_params,
    init_user_embeddings,
    load_checkpoint,
    save_checkpoint,
)
from .seeding import TAG_MALICIOUS_PICK, TAG_MODEL_INIT, TAG_USER_INIT, rng_for

log = logging.getLogger(__name__)


class RuntimeFailure(Exception):
    """Mid-run numeric or IO failure; maps to exit code 2."""


@dataclass
class RunArtifacts:
    output_dir: Path
    metrics_csv: Path
    final_checkpoint: Path
    resolved_config: Path
    series: list[MetricRow]


def pick_malicious_ids(client_ids: list[int], fraction: float, seed: int) -> list[int]:
    """The adversary's controlled users: a deterministic uniform draw of
    round(fraction * M) client ids."""
    count = int(round(fraction * len(client_ids)))
    if count == 0:
        return []
    rng = rng_for(seed, TAG_MALICIOUS_PICK)
    picked = rng.choice(np.asarray(client_ids, dtype=np.int64), size=count, replace=False)
    return sorted(int(i) for i in picked)


def build_simulation(
    cfg: ExperimentConfig, resume: Checkpoint | None = None
) -> tuple[Simulation, InteractionDataset, PopularityLabels, int]:
    """Load data, initialize (or restore) model state and assemble the
    simulation object. Returns the round index to start from."""
    records, _, _ = load_ratings(cfg.data_path, cfg.separator)
    labels = assign_popularity_labels(records, cfg.cutoffs)
    dataset = build_dataset(records, cfg.q, cfg.seed_data)

    if isinstance(cfg.target, int):
        if not 0 <= cfg.target < dataset.num_items:
            raise ConfigError(f"target item {cfg.target} outside 0..{dataset.num_items - 1}")
        target = cfg.target
    else:
        target = select_target_item(labels, dataset)

    client_ids = dataset.client_ids
    malicious = pick_malicious_ids(client_ids, cfg.malicious_fraction, cfg.seed_data)

    if resume is None:
        shared = init_global_params(
            dataset.num_items, cfg.dim, cfg.tower,
            rng_for(cfg.seed_model, TAG_MODEL_INIT), cfg.init_sigma, cfg.init_scheme,
            embed_sigma=cfg.embed_sigma)
        user_emb = init_user_embeddings(
            dataset.num_users, cfg.dim, rng_for(cfg.seed_model, TAG_USER_INIT),
            cfg.embed_sigma if cfg.init_scheme == "scaled" else cfg.init_sigma)
        emb_of = {uid: user_emb[uid].copy() for uid in client_ids}
        start_round = 0
    else:
        shared = resume.params
        if shared.num_items != dataset.num_items or shared.dim != cfg.dim:
            raise ConfigError("checkpoint shape does not match the configured model")
        emb_of = {uid: emb.copy() for uid, emb in
                  zip(resume.user_ids, resume.user_embeddings)}
        missing = [uid for uid in client_ids if uid not in emb_of]
        if missing:
            raise ConfigError(f"checkpoint lacks embeddings for {len(missing)} clients")
        start_round = resume.round_index

    clients = {
        uid: ClientRecord(
            user_id=uid,
            user_embedding=emb_of[uid],
            train_items=sorted(dataset.users[uid].positives),
            negatives=list(dataset.users[uid].negatives),
            holdout=dataset.users[uid].holdout,
        )
        for uid in client_ids
    }

    adversary = None
    if cfg.mode != "none" or cfg.malicious_fraction > 0:
        adv_cfg = AdversaryConfig(
            mode=cfg.mode, target_item=target, malicious_ids=malicious,
            alpha=cfg.alpha, gamma=cfg.gamma, craft_epochs=cfg.craft_epochs,
            craft_lr=cfg.craft_lr, p_norm=cfg.p_norm,
            fillers=None if cfg.fillers == "mean_profile" else int(cfg.fillers),
        )
        adversary = Adversary(adv_cfg)
        if resume is not None and resume.estimator_net is not None:
            adversary.estimator = PopularityEstimator(
                net=resume.estimator_net, num_classes=labels.num_classes,
                top_class=PopularityLabels.HIGH)

    sim = Simulation(
        dataset=dataset,
        labels=labels,
        shared=shared,
        clients=clients,
        adversary=adversary,
        target_item=target,
        eta=cfg.learning_rate,
        fraction=cfg.client_fraction,
        batch_size=cfg.batch_size,
        rule=cfg.rule,
        assumed_malicious_fraction=cfg.defense_fraction(),
        attack_start_epoch=cfg.attack_start_epoch if cfg.mode != "none" else None,
        round_seed=cfg.seed_rounds,
        er_k=cfg.er_k,
        hr_k=cfg.hr_k,
        eval_every=cfg.eval_every,
        force_include_malicious=cfg.force_include_malicious,
        resample_negatives=cfg.resample_negatives,
        threads=cfg.threads,
        estimator_epochs=cfg.estimator_epochs,
        estimator_lr=cfg.estimator_lr,
        estimator_batch=cfg.estimator_batch,
        estimator_seed=cfg.seed_model,
        poison_seed=cfg.seed_data,
    )
    if int(round(cfg.client_fraction * len(clients))) < 1:
        raise ConfigError("client_fraction rounds to zero participants")
    return sim, dataset, labels, start_round


def run_experiment(cfg: ExperimentConfig, resume_path: str | Path | None = None) -> RunArtifacts:
    """Execute one configured experiment and write its artifacts.

    Raises ConfigError for invalid setups (before any compute) and
    RuntimeFailure for mid-run numeric trouble, after flushing a checkpoint
    of the last consistent state.
    """
    resume = load_checkpoint(resume_path) if resume_path is not None else None
    sim, dataset, labels, start_round = build_simulation(cfg, resume)
    if start_round >= cfg.rounds:
        raise ConfigError(f"checkpoint is already at round {start_round}, nothing to run")

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = out / "resolved.ini"
    write_resolved(cfg, resolved)
    metrics_path = out / "metrics.csv"
    final_ck = out / "checkpoint_final.npz"
    last_round = start_round - 1

    def checkpoint_to(path: Path) -> None:
        ids = sorted(sim.clients)
        emb = np.stack([sim.clients[uid].user_embedding for uid in ids])
        est = sim.adversary.estimator.net if (
            sim.adversary is not None and sim.adversary.estimator is not None) else None
        save_checkpoint(path, last_round + 1, sim.shared, ids, emb, est)

    mode = "w" if resume is None else "a"
    series: list[MetricRow] = []
    with open(metrics_path, mode, newline="", encoding="utf-8") as fh:
        if fh.tell() == 0:
            fh.write(",".join(MetricRow.CSV_COLUMNS) + "\n")

        def on_round(report, row):
            nonlocal last_round
            last_round = report.t
            if not math.isfinite(report.aggregate_norm):
                raise ArithmeticError(f"aggregate norm is not finite at round {report.t}")
            if row is not None:
                fh.write(",".join(row.csv_values()) + "\n")
                series.append(row)
            if cfg.checkpoint_every and (report.t + 1) % cfg.checkpoint_every == 0:
                checkpoint_to(out / f"checkpoint_epoch{report.t}.npz")
            if report.t in cfg.export_embeddings_epochs:
                export_item_embeddings(out / f"embeddings_epoch{report.t}.csv",
                                       sim.shared, labels, sim.target_item)

        try:
            sim.train(cfg.rounds, start_round=start_round, on_round=on_round)
        except ArithmeticError as exc:
            fh.flush()
            checkpoint_to(out / "checkpoint_failure.npz")
            raise RuntimeFailure(str(exc)) from exc

    checkpoint_to(final_ck)
    log.info("run complete: %d rounds, artifacts in %s", cfg.rounds, out)
    return RunArtifacts(out, metrics_path, final_ck, resolved, series)
