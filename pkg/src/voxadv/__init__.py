"""Voxel-wise adversarial semi-supervised 3D segmentation, desk scale."""

from .core import (LabelMask, SoftPrediction, TrainConfig, Volume,
                   argmax_labels, one_hot_encode, preset_config, validate_config)
from .metrics import KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "LabelMask", "SoftPrediction", "TrainConfig", "Volume",
    "argmax_labels", "one_hot_encode", "preset_config", "validate_config",
    "KERNEL_BACKEND", "__version__",
]
