"""Experiment configuration: an INI file with sections, command-line
overrides on top, defaults below. Precedence: CLI > file > defaults.

Unknown sections or keys are rejected before any compute, and a resolved
snapshot (every default materialized) is written next to the run artifacts
so the experiment can be reproduced exactly.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .attack import ATTACK_MODES
from .defense import RULES


class ConfigError(Exception):
    """Invalid experiment configuration; maps to exit code 1."""


# Every known key with its default (as the string form the INI layer uses).
DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "path": "",
        "separator": "\\t",
        "q": "4",
        "resample_negatives": "false",
        "cutoff_high": "0.10",
        "cutoff_medium": "0.45",
    },
    "model": {
        "dim": "64",
        "tower": "64, 32, 16",
        "init_sigma": "1.0",
        "init_scheme": "scaled",
        "embed_sigma": "0.01",
        "batch_size": "64",
    },
    "federation": {
        "rounds": "100",
        "client_fraction": "0.1",
        "learning_rate": "0.01",
        "eval_every": "1",
        "er_k": "5",
        "hr_k": "10",
        "checkpoint_every": "0",
        "threads": "1",
    },
    "adversary": {
        "mode": "none",
        "fraction": "0.0",
        "attack_start_epoch": "0",
        "alpha": "60.0",
        "gamma": "0.0005",
        "craft_epochs": "30",
        "craft_lr": "0.01",
        "p_norm": "2.0",
        "target": "least_popular",
        "fillers": "mean_profile",
        "force_include_malicious": "false",
        "estimator_epochs": "400",
        "estimator_lr": "0.05",
        "estimator_batch": "32",
    },
    "defense": {
        "rule": "mean",
        "assumed_fraction": "adversary",
    },
    "seeds": {
        "data": "1",
        "model": "2",
        "rounds": "3",
    },
    "output": {
        "dir": "runs/experiment",
        "export_embeddings_epochs": "",
    },
}


@dataclass
class ExperimentConfig:
    """Typed view of a fully resolved configuration."""

    data_path: str
    separator: str
    q: int
    resample_negatives: bool
    cutoffs: tuple[float, float]

    dim: int
    tower: tuple[int, ...]
    init_sigma: float
    init_scheme: str
    embed_sigma: float
    batch_size: int

    rounds: int
    client_fraction: float
    learning_rate: float
    eval_every: int
    er_k: int
    hr_k: int
    checkpoint_every: int
    threads: int

    mode: str
    malicious_fraction: float
    attack_start_epoch: int
    alpha: float
    gamma: float
    craft_epochs: int
    craft_lr: float
    p_norm: float
    target: str | int
    fillers: str | int
    force_include_malicious: bool
    estimator_epochs: int
    estimator_lr: float
    estimator_batch: int

    rule: str
    assumed_fraction: float | None   # None = mirror the true malicious fraction

    seed_data: int
    seed_model: int
    seed_rounds: int

    output_dir: str
    export_embeddings_epochs: tuple[int, ...]

    raw: dict[str, dict[str, str]] = field(repr=False, default_factory=dict)

    def defense_fraction(self) -> float:
        return self.malicious_fraction if self.assumed_fraction is None else self.assumed_fraction


def _merge(file_values: dict[str, dict[str, str]],
           overrides: list[str]) -> dict[str, dict[str, str]]:
    merged = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
    for sec, keys in file_values.items():
        if sec not in merged:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, value in keys.items():
            if key not in merged[sec]:
                raise ConfigError(f"unknown key '{key}' in section [{sec}]")
            merged[sec][key] = value
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        sec, key = dotted.split(".", 1)
        if sec not in merged or key not in merged[sec]:
            raise ConfigError(f"unknown override target '{sec}.{key}'")
        merged[sec][key] = value
    return merged


def _to_int(sec, key, v, lo=None, hi=None) -> int:
    try:
        x = int(v)
    except ValueError:
        raise ConfigError(f"[{sec}] {key} must be an integer, got {v!r}") from None
    if lo is not None and x < lo:
        raise ConfigError(f"[{sec}] {key} must be >= {lo}, got {x}")
    if hi is not None and x > hi:
        raise ConfigError(f"[{sec}] {key} must be <= {hi}, got {x}")
    return x


def _to_float(sec, key, v, lo=None, hi=None, lo_open=False) -> float:
    try:
        x = float(v)
    except ValueError:
        raise ConfigError(f"[{sec}] {key} must be a number, got {v!r}") from None
    if lo is not None and (x < lo or (lo_open and x == lo)):
        raise ConfigError(f"[{sec}] {key} must be {'>' if lo_open else '>='} {lo}, got {x}")
    if hi is not None and x > hi:
        raise ConfigError(f"[{sec}] {key} must be <= {hi}, got {x}")
    return x


def _to_bool(sec, key, v) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"[{sec}] {key} must be a boolean, got {v!r}")


def _to_int_list(sec, key, v) -> tuple[int, ...]:
    v = v.strip()
    if not v:
        return ()
    try:
        return tuple(int(p.strip()) for p in v.split(","))
    except ValueError:
        raise ConfigError(f"[{sec}] {key} must be a comma-separated integer list") from None


def validate(merged: dict[str, dict[str, str]]) -> ExperimentConfig:
    d, m, f = merged["data"], merged["model"], merged["federation"]
    a, de, s, o = merged["adversary"], merged["defense"], merged["seeds"], merged["output"]

    separator = bytes(d["separator"], "utf-8").decode("unicode_escape")
    cutoffs = (_to_float("data", "cutoff_high", d["cutoff_high"], 0.0, 1.0, lo_open=True),
               _to_float("data", "cutoff_medium", d["cutoff_medium"], 0.0, 1.0, lo_open=True))
    if cutoffs[0] >= cutoffs[1]:
        raise ConfigError("[data] cutoff_high must be below cutoff_medium")

    mode = a["mode"].strip().lower()
    if mode not in ATTACK_MODES:
        raise ConfigError(f"[adversary] mode must be one of {ATTACK_MODES}, got {mode!r}")
    init_scheme = m["init_scheme"].strip().lower()
    if init_scheme not in ("scaled", "gaussian"):
        raise ConfigError(f"[model] init_scheme must be 'scaled' or 'gaussian', got {init_scheme!r}")
    rule = de["rule"].strip().lower()
    if rule not in RULES:
        raise ConfigError(f"[defense] rule must be one of {RULES}, got {rule!r}")

    target: str | int = a["target"].strip()
    if target != "least_popular":
        target = _to_int("adversary", "target", target, lo=0)
    fillers: str | int = a["fillers"].strip()
    if fillers != "mean_profile":
        fillers = _to_int("adversary", "fillers", fillers, lo=0)

    assumed_raw = de["assumed_fraction"].strip().lower()
    assumed = None if assumed_raw == "adversary" else _to_float(
        "defense", "assumed_fraction", assumed_raw, 0.0, 1.0)

    rounds = _to_int("federation", "rounds", f["rounds"], lo=1)
    attack_start = _to_int("adversary", "attack_start_epoch", a["attack_start_epoch"], lo=0)

    cfg = ExperimentConfig(
        data_path=d["path"].strip(),
        separator=separator,
        q=_to_int("data", "q", d["q"], lo=1),
        resample_negatives=_to_bool("data", "resample_negatives", d["resample_negatives"]),
        cutoffs=cutoffs,
        dim=_to_int("model", "dim", m["dim"], lo=1),
        tower=_to_int_list("model", "tower", m["tower"]),
        init_sigma=_to_float("model", "init_sigma", m["init_sigma"], 0.0, lo_open=True),
        init_scheme=init_scheme,
        embed_sigma=_to_float("model", "embed_sigma", m["embed_sigma"], 0.0, lo_open=True),
        batch_size=_to_int("model", "batch_size", m["batch_size"], lo=1),
        rounds=rounds,
        client_fraction=_to_float("federation", "client_fraction",
                                  f["client_fraction"], 0.0, 1.0, lo_open=True),
        learning_rate=_to_float("federation", "learning_rate",
                                f["learning_rate"], 0.0, lo_open=True),
        eval_every=_to_int("federation", "eval_every", f["eval_every"], lo=1),
        er_k=_to_int("federation", "er_k", f["er_k"], lo=1),
        hr_k=_to_int("federation", "hr_k", f["hr_k"], lo=1),
        checkpoint_every=_to_int("federation", "checkpoint_every", f["checkpoint_every"], lo=0),
        threads=_to_int("federation", "threads", f["threads"], lo=1),
        mode=mode,
        malicious_fraction=_to_float("adversary", "fraction", a["fraction"], 0.0, 1.0),
        attack_start_epoch=attack_start,
        alpha=_to_float("adversary", "alpha", a["alpha"], 0.0),
        gamma=_to_float("adversary", "gamma", a["gamma"], 0.0),
        craft_epochs=_to_int("adversary", "craft_epochs", a["craft_epochs"], lo=1),
        craft_lr=_to_float("adversary", "craft_lr", a["craft_lr"], 0.0, lo_open=True),
        p_norm=_to_float("adversary", "p_norm", a["p_norm"], 1.0, lo_open=True),
        target=target,
        fillers=fillers,
        force_include_malicious=_to_bool("adversary", "force_include_malicious",
                                         a["force_include_malicious"]),
        estimator_epochs=_to_int("adversary", "estimator_epochs", a["estimator_epochs"], lo=1),
        estimator_lr=_to_float("adversary", "estimator_lr", a["estimator_lr"], 0.0, lo_open=True),
        estimator_batch=_to_int("adversary", "estimator_batch", a["estimator_batch"], lo=1),
        rule=rule,
        assumed_fraction=assumed,
        seed_data=_to_int("seeds", "data", s["data"]),
        seed_model=_to_int("seeds", "model", s["model"]),
        seed_rounds=_to_int("seeds", "rounds", s["rounds"]),
        output_dir=o["dir"].strip(),
        export_embeddings_epochs=_to_int_list("output", "export_embeddings_epochs",
                                              o["export_embeddings_epochs"]),
        raw=merged,
    )
    if not cfg.data_path:
        raise ConfigError("[data] path is required")
    if not cfg.tower:
        raise ConfigError("[model] tower must list at least one layer size")
    if cfg.mode != "none":
        if cfg.malicious_fraction <= 0:
            raise ConfigError("[adversary] fraction must be positive when an attack is enabled")
        if cfg.attack_start_epoch > cfg.rounds:
            raise ConfigError("[adversary] attack_start_epoch must be <= federation rounds")
    return cfg


def read_ini(path: str | Path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    return {sec: dict(parser.items(sec)) for sec in parser.sections()}


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    file_values = read_ini(path) if path is not None else {}
    return validate(_merge(file_values, overrides or []))


def write_resolved(cfg: ExperimentConfig, path: str | Path) -> None:
    """Materialize every key (defaults included) so the file alone reproduces
    the run."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for sec, keys in cfg.raw.items():
        parser[sec] = dict(keys)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
