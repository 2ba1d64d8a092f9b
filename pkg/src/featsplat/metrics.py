"""Image quality metrics for evaluation tables."""

import math

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigurationError

# Rec. 601 luma weights used for the grayscale conversion inside ssim
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _windowed_mean(img, kernel):
    # separable Gaussian filter, cropped to the fully-valid interior
    half = SSIM_WINDOW // 2
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a, b):
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5).

    Color inputs are converted to luma first; inputs smaller than the window
    are rejected.
    """
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {a.shape} vs {b.shape}")
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim == 3:
        x = x @ LUMA
        y = y @ LUMA
    if min(x.shape) < SSIM_WINDOW:
        raise ConfigurationError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    k = _gaussian_kernel()
    mu_x = _windowed_mean(x, k)
    mu_y = _windowed_mean(y, k)
    var_x = _windowed_mean(x * x, k) - mu_x * mu_x
    var_y = _windowed_mean(y * y, k) - mu_y * mu_y
    cov = _windowed_mean(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))
