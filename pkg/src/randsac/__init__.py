"""Random segments with autoregressive coding: masked ViT pretraining in numpy."""
from .layout import PartitionSpec, sample_layout
from .model import ModelConfig, RandSAC
from .trainer import TrainConfig, pretrain

__all__ = ["ModelConfig", "PartitionSpec", "RandSAC", "TrainConfig", "pretrain", "sample_layout"]
__version__ = "0.1.0"
