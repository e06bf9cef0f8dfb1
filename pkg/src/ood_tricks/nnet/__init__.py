"""Two-head classifier, its optimizer and the training loop."""

from .model import (
    ArchConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    multi_objective_loss,
    save_checkpoint,
    soft_cross_entropy,
)
from .optim import OptimizerState, ScaleCycle, adamw_step, cosine_lr, cyclic_scale, init_optimizer
from .training import TrainConfig, TrainLog, accumulate_gradients, train

__all__ = [
    "ArchConfig", "ModelParams", "backward", "forward", "init_params", "load_checkpoint",
    "loss_and_grad", "multi_objective_loss", "save_checkpoint", "soft_cross_entropy",
    "OptimizerState", "ScaleCycle", "adamw_step", "cosine_lr", "cyclic_scale", "init_optimizer",
    "TrainConfig", "TrainLog", "accumulate_gradients", "train",
]
