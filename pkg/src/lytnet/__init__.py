"""Lightweight YUV transformer for low-light image enhancement, on a numpy autodiff core."""
from .color import rgb_to_yuv, yuv_to_rgb
from .estimator import LYTNetEnhancer
from .losses import LossWeights, hybrid_loss
from .metrics import ciede2000, gt_mean_adjust, psnr, ssim
from .model import ModelConfig, ModelParams, count_params, init_params, model_forward
from .trainer import TrainConfig, cosine_lr, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "LYTNetEnhancer", "LossWeights", "ModelConfig", "ModelParams", "TrainConfig",
    "ciede2000", "cosine_lr", "count_params", "gt_mean_adjust", "hybrid_loss", "init_params",
    "load_checkpoint", "model_forward", "psnr", "rgb_to_yuv", "save_checkpoint", "ssim", "train",
    "yuv_to_rgb",
]
