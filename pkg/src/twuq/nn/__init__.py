"""Minimal convolutional network stack with hand-written backward passes."""

from .layers import (
    Conv2d,
    ConvTranspose2d,
    Dropout,
    MaxPool2d,
    Parameter,
    ReLU,
    concat_channels,
    masked_mse_loss,
    split_channels,
)
from .network import (
    CheckpointCompatibilityError,
    CheckpointError,
    CheckpointHeaderError,
    CheckpointPayloadError,
    CheckpointVersionError,
    NetworkWeights,
    UNet,
    UNetConfig,
    checkpoint_config_hash,
    load_weights,
    save_weights,
)
from .training import Adam, TrainConfig, TrainingError, learning_rate_at, train_network

__all__ = [
    "Conv2d",
    "ConvTranspose2d",
    "Dropout",
    "MaxPool2d",
    "Parameter",
    "ReLU",
    "concat_channels",
    "split_channels",
    "masked_mse_loss",
    "UNet",
    "UNetConfig",
    "NetworkWeights",
    "save_weights",
    "load_weights",
    "checkpoint_config_hash",
    "CheckpointError",
    "CheckpointHeaderError",
    "CheckpointVersionError",
    "CheckpointPayloadError",
    "CheckpointCompatibilityError",
    "Adam",
    "TrainConfig",
    "TrainingError",
    "learning_rate_at",
    "train_network",
]
