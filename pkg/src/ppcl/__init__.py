"""PPCL: popularity prediction with supervised contrastive auxiliary tasks."""

from .data import Dataset, PostRecord, SyntheticSpec, UserRecord, generate_synthetic
from .model import ModelConfig, PPCLModel
from .training import TrainConfig, evaluate, train

__all__ = [
    "Dataset", "PostRecord", "UserRecord", "SyntheticSpec", "generate_synthetic",
    "ModelConfig", "PPCLModel", "TrainConfig", "train", "evaluate",
]

__version__ = "0.1.0"
