"""Single-phase clustering by swapped self-labelling with a mutual-information head."""

from .estimator import IMCSwAV
from .trainer import TrainConfig, Trainer, evaluate, train

__all__ = ["IMCSwAV", "TrainConfig", "Trainer", "evaluate", "train"]
__version__ = "0.1.0"
