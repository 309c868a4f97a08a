"""Cluster-conditioned meta-learned sequential recommender."""

from .config import RunConfig, load_config
from .data import Corpus, ingest_interactions, preprocess, split_users
from .evaluation import evaluate, metrics_from_ranks, rank_positive
from .meta import build_parameter_store, load_checkpoint, save_checkpoint, train

__all__ = [
    "RunConfig",
    "load_config",
    "Corpus",
    "ingest_interactions",
    "preprocess",
    "split_users",
    "evaluate",
    "metrics_from_ranks",
    "rank_positive",
    "build_parameter_store",
    "save_checkpoint",
    "load_checkpoint",
    "train",
]
