"""Minimal reverse-mode autodiff engine for the detection networks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import BatchNorm, Conv2d, ConvBlock, Deconv2d, DenseBlock, Linear, Module
from .ops import (
    batchnorm,
    channel_softmax,
    conv2d,
    deconv2d,
    fully_connected,
    maxpool2,
    relu,
    sigmoid,
    spatial_softmax,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "Adam", "AdamState", "BatchNorm", "Conv2d", "ConvBlock", "Deconv2d", "DenseBlock", "Linear",
    "Module", "Tensor", "adam_step", "batchnorm", "channel_softmax", "conv2d", "deconv2d",
    "fully_connected", "load_checkpoint", "maxpool2", "no_grad", "relu", "save_checkpoint",
    "sigmoid", "spatial_softmax",
]
