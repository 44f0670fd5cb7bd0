"""Noise-robust speaker verification with dual noise-extraction / enhancement U-Nets."""

from .dual_unet import DualUNet, UNet, UNetConfig, Variant
from .model import ModelConfig, ParaNoiseSV, count_parameters, tiny_model_config
from .sv_backbone import SVBackbone, SVConfig

__version__ = "0.1.0"

__all__ = [
    "DualUNet",
    "ModelConfig",
    "ParaNoiseSV",
    "SVBackbone",
    "SVConfig",
    "UNet",
    "UNetConfig",
    "Variant",
    "count_parameters",
    "tiny_model_config",
]
