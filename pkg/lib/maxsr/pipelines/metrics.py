"""Full-reference image quality: PSNR and single-scale SSIM."""

import logging

import numpy as np
from scipy import signal

from maxsr.errors import ShapeError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def shave(image: np.ndarray, border: int) -> np.ndarray:
    """Strip `border` pixels from all four sides of the two leading axes."""
    if border < 0:
        raise ValueError(f"Border must be >= 0, got {border}")
    height, width = image.shape[:2]
    if height <= 2 * border or width <= 2 * border:
        raise ShapeError(f"A {height}x{width} image cannot lose a {border}px border")

    return image[border : height - border, border : width - border]


def psnr(a: np.ndarray, b: np.ndarray, border: int = 0, peak: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB after shaving `border` pixels per side.

    Identical images report PSNR_CAP rather than infinity, and no value
    exceeds it.

    Raises:
      ShapeError: differing shapes, or images too small for the border.
    """
    if a.shape != b.shape:
        raise ShapeError(f"Cannot compare {a.shape} with {b.shape}")
    diff = shave(np.asarray(a, np.float64), border) - shave(
        np.asarray(b, np.float64), border
    )
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return PSNR_CAP

    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    axis = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-(axis**2) / (2.0 * sigma**2))
    window = np.outer(profile, profile)

    return window / window.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """
    Mean SSIM over every valid 11x11 Gaussian-weighted window (sigma 1.5).

    Args:
      a, b: np.ndarray
        Single-channel images of equal shape, at least 11x11.
      data_range: float
        Dynamic range of the values (1 for [0, 1] images, 255 for 8-bit).

    Raises:
      ShapeError: differing shapes, extra channels or too-small images.
    """
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(
            f"SSIM needs two equal single-channel images, got {a.shape}, {b.shape}"
        )
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs {SSIM_WINDOW} pixels per side, got {a.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    window = gaussian_window()

    def filtered(values: np.ndarray) -> np.ndarray:
        return signal.correlate2d(values, window, mode="valid")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filtered(a), filtered(b)
    var_a = filtered(a * a) - mu_a**2
    var_b = filtered(b * b) - mu_b**2
    covar = filtered(a * b) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * covar + c2)
    denominator = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)

    return float(np.mean(numerator / denominator))
