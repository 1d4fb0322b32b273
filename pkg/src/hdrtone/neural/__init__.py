"""Tensor engine, the two context-aggregation networks, Adam, checkpoints."""

from .engine import Tensor, conv2d_dilated
from .can import (
    CanConfig,
    CanParams,
    LayerSpec,
    adaptive_norm,
    can_backward,
    can_forward,
    can_infer,
    init_can_params,
    lrelu,
)
from .optim import AdamState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "conv2d_dilated",
    "CanConfig",
    "CanParams",
    "LayerSpec",
    "adaptive_norm",
    "can_backward",
    "can_forward",
    "can_infer",
    "init_can_params",
    "lrelu",
    "AdamState",
    "adam_step",
    "load_checkpoint",
    "save_checkpoint",
]
