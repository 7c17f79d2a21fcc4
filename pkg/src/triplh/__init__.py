"""Hyperbolic triplet-loss recommender with Euclidean and Poincare baselines."""

from .data import InteractionDataset, build_dataset, load_amazon_csv, load_movielens, load_split, save_split
from .evaluation import EvalReport, evaluate, rank_all
from .model import EmbeddingTable, ModelConfig, ModelKind, load_checkpoint, save_checkpoint
from .trainer import TrainingDiverged, TrainSchedule, train

__all__ = [
    "EmbeddingTable",
    "EvalReport",
    "InteractionDataset",
    "ModelConfig",
    "ModelKind",
    "TrainSchedule",
    "TrainingDiverged",
    "build_dataset",
    "evaluate",
    "load_amazon_csv",
    "load_checkpoint",
    "load_movielens",
    "load_split",
    "rank_all",
    "save_checkpoint",
    "save_split",
    "train",
]
