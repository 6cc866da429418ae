"""Robust training loss and image quality metrics.

The Huber penalty is applied elementwise and averaged: quadratic for
residuals of magnitude <= 1, linear beyond, so the per-pixel gradient is
bounded by 1. PSNR uses peak 1.0 (images live in [0, 1]). SSIM follows the
standard 11x11 Gaussian window (sigma 1.5) with stabilizers C1=0.01^2 and
C2=0.03^2, scored on luma for colour images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ContractViolation
from .imaging import validate_image

SSIM_WINDOW_SIZE = 11
SSIM_WINDOW_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class MetricsReport:
    """PSNR/SSIM pair for one image comparison."""

    psnr: float
    ssim: float
    pixel_count: int

    def to_text(self) -> str:
        """Flat key-value block."""
        return (
            f"psnr_db = {self.psnr}\n"
            f"ssim = {self.ssim}\n"
            f"pixel_count = {self.pixel_count}\n"
        )

    def to_record(self) -> str:
        """Machine-readable one-line record (JSON)."""
        return json.dumps(
            {"psnr_db": self.psnr, "ssim": self.ssim, "pixel_count": self.pixel_count}
        )


def huber_loss(residual: np.ndarray) -> float:
    """Mean elementwise Huber penalty: 0.5*e^2 if |e| <= 1 else |e| - 0.5."""
    res = np.asarray(residual, dtype=np.float64)
    if res.size == 0:
        raise ContractViolation("huber_loss needs a non-empty residual")
    mag = np.abs(res)
    quad = mag <= 1.0
    values = np.where(quad, 0.5 * res * res, mag - 0.5)
    return float(values.mean())


def huber_grad(residual: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the Huber penalty: e if |e| <= 1 else sign(e)."""
    res = np.asarray(residual, dtype=np.float64)
    return np.where(np.abs(res) <= 1.0, res, np.sign(res))


def _check_same_shape(reference: np.ndarray, test: np.ndarray):
    ref = validate_image(reference, "reference")
    tst = validate_image(test, "test")
    if ref.shape != tst.shape:
        raise ContractViolation(
            f"image shapes differ: reference {ref.shape} vs test {tst.shape}"
        )
    return ref, tst


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; +inf for identical images."""
    ref, tst = _check_same_shape(reference, test)
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def to_luma(image: np.ndarray) -> np.ndarray:
    """Collapse a colour image to its luma channel; grayscale passes through."""
    img = validate_image(image)
    if img.ndim == 2:
        return img
    return img @ LUMA_WEIGHTS


def _ssim_window() -> np.ndarray:
    half = SSIM_WINDOW_SIZE // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)
    win = np.exp(-(xx**2 + yy**2) / (2.0 * SSIM_WINDOW_SIGMA**2))
    return win / win.sum()


def ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """Mean local SSIM index over all fully-contained window positions."""
    ref, tst = _check_same_shape(reference, test)
    x = to_luma(ref)
    y = to_luma(tst)
    h, w = x.shape
    if h < SSIM_WINDOW_SIZE or w < SSIM_WINDOW_SIZE:
        raise ContractViolation(
            f"image {h}x{w} smaller than the {SSIM_WINDOW_SIZE}x{SSIM_WINDOW_SIZE} SSIM window"
        )
    win = _ssim_window()

    def local_mean(a):
        return convolve2d(a, win, mode="valid")

    mu_x = local_mean(x)
    mu_y = local_mean(y)
    var_x = local_mean(x * x) - mu_x * mu_x
    var_y = local_mean(y * y) - mu_y * mu_y
    cov = local_mean(x * y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(numerator / denominator))


def compare(reference: np.ndarray, test: np.ndarray) -> MetricsReport:
    """Score ``test`` against ``reference`` with both metrics."""
    ref, _ = _check_same_shape(reference, test)
    return MetricsReport(
        psnr=psnr(reference, test),
        ssim=ssim(reference, test),
        pixel_count=int(ref.shape[0] * ref.shape[1]),
    )
