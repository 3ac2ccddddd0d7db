"""Supernet construction, single-path training and evolutionary search."""

from .search import (
    Candidate,
    InfeasibleBudget,
    PathSpace,
    SearchConfig,
    SearchResult,
    SearchState,
    evolutionary_search,
    exhaustive_best,
    rank_key,
    repair_last_layer,
)
from .spos import TrainConfig, Trainer, TrainingAborted, accuracy, evaluate_subnet, predict, train_supernet
from .supernet import Cell, Supernet, build_supernet, parse_path, path_str, sample_path, supernet_template

__all__ = [
    "Candidate",
    "Cell",
    "InfeasibleBudget",
    "PathSpace",
    "SearchConfig",
    "SearchResult",
    "SearchState",
    "Supernet",
    "TrainConfig",
    "Trainer",
    "TrainingAborted",
    "accuracy",
    "build_supernet",
    "evaluate_subnet",
    "evolutionary_search",
    "exhaustive_best",
    "parse_path",
    "path_str",
    "predict",
    "rank_key",
    "repair_last_layer",
    "sample_path",
    "supernet_template",
    "train_supernet",
]
