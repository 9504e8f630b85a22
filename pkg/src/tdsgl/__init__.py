"""Graph collaborative filtering with topology-aware debiased contrastive learning."""

from .data import InteractionDataset, parse_adjacency_list, split_dataset
from .trainer import Hyperparameters, train

__all__ = ["InteractionDataset", "Hyperparameters", "parse_adjacency_list", "split_dataset", "train"]
__version__ = "0.1.0"
