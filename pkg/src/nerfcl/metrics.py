"""PSNR and SSIM on images with values in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from nerfcl.errors import DomainError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE), capped at 100 dB. ``mask`` (H, W) selects pixels to score."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(diff * diff)) if diff.size else 0.0
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window():
    x = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2
    g = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, then keep only fully-covered window positions
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    h = SSIM_WINDOW // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim(a, b) -> float:
    """Mean SSIM of channel-averaged images, 11-tap Gaussian window, sigma 1.5."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    x, y = _gray(a), _gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise DomainError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))
