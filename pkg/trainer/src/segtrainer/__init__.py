"""Metric-learning trainer for voxelized segment descriptors."""

from .errors import ConfigError, DataError
from .losses import batch_hard_loss, batch_hard_terms
from .train import TrainConfig, embed_samples, recall_at_1

__all__ = [
    "ConfigError",
    "DataError",
    "TrainConfig",
    "batch_hard_loss",
    "batch_hard_terms",
    "embed_samples",
    "recall_at_1",
]
