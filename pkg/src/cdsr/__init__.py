"""Cross-domain sequential recommendation with intra-domain masked attention,
transition-aware positional embeddings and dynamic domain state representations."""

from .dataio import Catalog, SynthConfig, UserSequence, generate_synthetic, preprocess, split_leave_one_out
from .model import ModelConfig, SequenceModel
from .traineval import TrainConfig, evaluate, train

__all__ = [
    "Catalog",
    "ModelConfig",
    "SequenceModel",
    "SynthConfig",
    "TrainConfig",
    "UserSequence",
    "evaluate",
    "generate_synthetic",
    "preprocess",
    "split_leave_one_out",
    "train",
]

__version__ = "0.1.0"
