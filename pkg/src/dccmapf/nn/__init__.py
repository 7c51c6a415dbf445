"""Minimal tensor and reverse-mode autodiff core."""
from . import ops
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, relative_error
from .layers import forward_layer, gru_cell, multi_head_attention
from .optim import Adam
from .tensor import DEFAULT_DTYPE, ShapeError, Tape, Tensor, backward

__all__ = [
    "Adam",
    "Checkpoint",
    "CheckpointError",
    "DEFAULT_DTYPE",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "forward_layer",
    "gradcheck",
    "gru_cell",
    "load_checkpoint",
    "multi_head_attention",
    "ops",
    "relative_error",
    "save_checkpoint",
]
