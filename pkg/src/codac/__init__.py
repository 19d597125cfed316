"""Contextual-discrepancy-aware contrastive learning for time-series diagnosis."""
from .pipeline import TrainConfig, stage1, stage2, stage3, save_checkpoint, load_checkpoint

__all__ = ["TrainConfig", "stage1", "stage2", "stage3", "save_checkpoint", "load_checkpoint"]
__version__ = "0.1.0"
