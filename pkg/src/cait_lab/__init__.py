"""Desk-scale CaiT: LayerScale residual weighting and class-attention transformers."""
from .blocks import ConfigError, parse_strategy
from .cait import CaitConfig, build_model, forward, model_presets
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset, synthetic
from .flops import count_flops, count_params
from .tensor import NonFiniteError, ShapeError, Tape, Tensor
from .train import TrainConfig, retrain_fixed, train_run

__version__ = "0.1.0"

__all__ = [
    "CaitConfig",
    "ConfigError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "build_model",
    "count_flops",
    "count_params",
    "forward",
    "load_checkpoint",
    "load_dataset",
    "model_presets",
    "parse_strategy",
    "retrain_fixed",
    "save_checkpoint",
    "synthetic",
    "train_run",
]
