"""Minimal numpy neural-network engine with manual backpropagation."""

from .checkpoint import load_checkpoint, save_checkpoint
from .functional import cross_entropy, log_softmax, mse_loss, sigmoid, softmax
from .gradcheck import check_gradients
from .layers import (LSTM, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ReLU,
                     Sequential, backward, layer_from_config)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "LSTM", "Adam", "AdamState", "Conv2D", "Dense", "Dropout", "Flatten", "Layer",
    "MaxPool2D", "ReLU", "Sequential", "adam_step", "backward", "check_gradients",
    "cross_entropy", "layer_from_config", "load_checkpoint", "log_softmax", "mse_loss",
    "save_checkpoint", "sigmoid", "softmax",
]
