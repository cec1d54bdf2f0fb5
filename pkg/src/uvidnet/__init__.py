"""UVid-Net: two-branch temporal encoder-decoder for UAV video segmentation."""
from .model import ArchConfig, ModelGraph, build_unet_baseline, build_uvidnet, count_flops, count_params
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "GradTape", "ModelGraph", "Tensor", "build_unet_baseline", "build_uvidnet", "count_flops",
    "count_params",
]
