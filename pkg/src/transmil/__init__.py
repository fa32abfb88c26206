"""Correlated multiple-instance learning with Nyström attention and PPEG."""

from transmil.data import PRESETS, SyntheticConfig, generate_synthetic_dataset
from transmil.mil import Bag, MeanPoolMIL
from transmil.model import TransMILModel, load_checkpoint, save_checkpoint
from transmil.train import TrainConfig, evaluate, train_loop

__all__ = [
    "PRESETS",
    "Bag",
    "MeanPoolMIL",
    "SyntheticConfig",
    "TrainConfig",
    "TransMILModel",
    "evaluate",
    "generate_synthetic_dataset",
    "load_checkpoint",
    "save_checkpoint",
    "train_loop",
]
