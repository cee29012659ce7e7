"""
This submodule contains the workflows built on the network: image handling and
bicubic resampling, quality metrics, benchmark evaluation, training, the
attention cost benchmark and the gradient-check suites.
"""

from .evaluate import (
    BicubicUpscaler,
    EvalReport,
    evaluate_dataset,
    self_ensemble_forward,
)
from .imaging import ImageBuffer, bicubic_resize, rgb_to_y
from .metrics import psnr, ssim
from .train import PairDataset, TrainConfig

__all__ = [
    "BicubicUpscaler",
    "EvalReport",
    "evaluate_dataset",
    "self_ensemble_forward",
    "ImageBuffer",
    "bicubic_resize",
    "rgb_to_y",
    "psnr",
    "ssim",
    "PairDataset",
    "TrainConfig",
]
