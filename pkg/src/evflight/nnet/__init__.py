from .layers import ELU, Conv2d, GridAvgPool, Linear, MaxPool2x2, ShapeError, log_softmax, softmax
from .model import (ConvSpec, LossResult, LossWeights, Model, ModelConfig, NonFiniteError,
                    load_model, loss, save_model)
from .optim import AdamState, adam_step
from .train import TrainConfig, TrainingDiverged, evaluate_loss, train, write_history

__all__ = [
    "ELU", "Conv2d", "GridAvgPool", "Linear", "MaxPool2x2", "ShapeError", "log_softmax", "softmax",
    "ConvSpec", "LossResult", "LossWeights", "Model", "ModelConfig", "NonFiniteError",
    "load_model", "loss", "save_model", "AdamState", "adam_step",
    "TrainConfig", "TrainingDiverged", "evaluate_loss", "train", "write_history",
]
