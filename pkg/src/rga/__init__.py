"""Lightweight region-guided attention network for retinal vessel
segmentation, with a self-contained NCHW autodiff engine."""

from . import data, losses, metrics, ops, optim
from .checkpoint import load_checkpoint, save_checkpoint
from .net import ModelConfig, RGANet, StageActivations
from .tensor import Param, ParamRegistry, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "Param",
    "ParamRegistry",
    "RGANet",
    "StageActivations",
    "Tape",
    "Tensor",
    "backward",
    "data",
    "load_checkpoint",
    "losses",
    "metrics",
    "ops",
    "optim",
    "save_checkpoint",
    "__version__",
]
