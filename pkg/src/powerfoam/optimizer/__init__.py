"""Fitting scenes to posed images through the differentiable rasterizer."""

from .diff import ParamGradient, backward, differentiable_frame
from .losses import (LossBreakdown, LossWeights, Schedule, ContributionRecords, loss_connect, loss_normal,
                     loss_rgb, loss_sparse, loss_ssim, psnr, ssim)
from .train import (NonFiniteLossError, PrimitiveStats, TrainConfig, densify, fit, init_scene,
                    json_logger, prune)

__all__ = [
    "ParamGradient", "backward", "differentiable_frame",
    "LossBreakdown", "LossWeights", "Schedule", "ContributionRecords", "loss_connect", "loss_normal",
    "loss_rgb", "loss_sparse", "loss_ssim", "psnr", "ssim",
    "NonFiniteLossError", "PrimitiveStats", "TrainConfig", "densify", "fit", "init_scene", "json_logger",
    "prune",
]
