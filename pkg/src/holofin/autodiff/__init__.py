"""Minimal reverse-mode automatic differentiation over dense real tensors."""

from . import ops
from .optim import AdamState, adam_step, cosine_warm_restart_lr
from .tensor import Node, Tape, Tensor, backward, current_tape

__all__ = ["ops", "Tensor", "Tape", "Node", "backward", "current_tape",
           "AdamState", "adam_step", "cosine_warm_restart_lr"]
