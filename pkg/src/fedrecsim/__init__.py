"""Desk-scale simulator of a federated collaborative-filtering recommender
under targeted item-promotion poisoning, with robust-aggregation defenses and
attack/quality metrics."""

__version__ = "0.1.0"

from .data import (
    InteractionDataset,
    PopularityLabels,
    RatingRecord,
    assign_popularity_labels,
    build_dataset,
    load_ratings,
    select_target_item,
)
from .model import GlobalParams, GradientUpdate, LocalClientState
from .federation import Simulation, run_round, sample_clients
from .config import ExperimentConfig, load_config
from .runner import run_experiment

__all__ = [
    "InteractionDataset",
    "PopularityLabels",
    "RatingRecord",
    "assign_popularity_labels",
    "build_dataset",
    "load_ratings",
    "select_target_item",
    "GlobalParams",
    "GradientUpdate",
    "LocalClientState",
    "Simulation",
    "run_round",
    "sample_clients",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "__version__",
]
