"""From-scratch CNN framework: layers, denoiser graph, SGD and model files."""

from .model import DenoiserModel, LayerSpec, backward, build_denoiser, forward
from .train import TrainConfig, mse_loss, sgd_train
from .io import load_model, save_model

__all__ = [
    "DenoiserModel",
    "LayerSpec",
    "TrainConfig",
    "backward",
    "build_denoiser",
    "forward",
    "load_model",
    "mse_loss",
    "save_model",
    "sgd_train",
]
