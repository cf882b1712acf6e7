"""Minimal reverse-mode differentiable layer set."""
from . import functional
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .layers import BatchNorm2d, ChannelConv1d, Conv2d, DepthwiseConv2d, Module, PReLU
from .tape import FlopCounter, Tape, Tensor, as_tensor, backward

__all__ = [
    "functional", "Tensor", "Tape", "backward", "as_tensor", "FlopCounter",
    "Module", "Conv2d", "DepthwiseConv2d", "BatchNorm2d", "PReLU", "ChannelConv1d",
    "save_checkpoint", "load_checkpoint", "FORMAT_VERSION",
]
