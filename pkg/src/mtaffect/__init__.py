"""Multi-task affective analysis toolkit.

Pyramid-feature model with valence-arousal, expression, and action-unit
heads; masked multi-task losses; teacher-student missing-label
completion; and the full evaluation metric suite.
"""

from .losses import LossWeights, TargetSet
from .model import ModelConfig, MultiTaskPrediction, MultiTaskPyramidNet, build_model
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "LossWeights",
    "ModelConfig",
    "MultiTaskPrediction",
    "MultiTaskPyramidNet",
    "TargetSet",
    "TrainConfig",
    "build_model",
    "__version__",
]
