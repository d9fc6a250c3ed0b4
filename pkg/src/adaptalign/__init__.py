"""Parameter-efficient alignment of frozen image and report encoders with temporal-multiview records."""
from .model import AlignmentModel, ModelConfig, build_model
from .records import Record, make_synthetic_corpus
from .trainer import Ablation, LossWeights, TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "AlignmentModel",
    "ModelConfig",
    "build_model",
    "Record",
    "make_synthetic_corpus",
    "Ablation",
    "LossWeights",
    "TrainConfig",
    "Trainer",
]
