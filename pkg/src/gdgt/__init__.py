"""Distortion-aware super-resolution for equirectangular 360-degree images."""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import bicubic_resize, distortion_map
from .metrics import psnr, ssim, ws_l1, ws_psnr, ws_ssim
from .model import GDGT, ModelConfig, gdgt_forward
from .training import TrainConfig, lr_at, train_loop

__all__ = [
    "GDGT",
    "ModelConfig",
    "TrainConfig",
    "bicubic_resize",
    "distortion_map",
    "gdgt_forward",
    "load_checkpoint",
    "lr_at",
    "psnr",
    "save_checkpoint",
    "ssim",
    "train_loop",
    "ws_l1",
    "ws_psnr",
    "ws_ssim",
]
