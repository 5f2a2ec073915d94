"""Convolutional capsule network pipeline for 4-class H&E histology images."""

from .capsnet import (
    CLASS_NAMES,
    MarginLossConfig,
    Network,
    NetworkConfig,
    build_network,
    forward,
    backward,
    margin_loss,
    parameter_count,
    routing,
    squash,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
