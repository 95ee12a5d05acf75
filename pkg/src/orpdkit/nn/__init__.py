from .autodiff import Tensor, backward
from .models import (
    Model,
    ModelConfig,
    build_model,
    build_shift_operator,
    forward,
    load_checkpoint,
    masked_loss,
    save_checkpoint,
)
from .training import Hyper, TrainingDiverged, TrainReport, hyper_search, train

__all__ = [
    "Tensor",
    "backward",
    "Model",
    "ModelConfig",
    "build_model",
    "build_shift_operator",
    "forward",
    "masked_loss",
    "save_checkpoint",
    "load_checkpoint",
    "Hyper",
    "TrainReport",
    "TrainingDiverged",
    "train",
    "hyper_search",
]
