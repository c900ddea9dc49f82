"""Image fidelity metrics at 8-bit scale plus gray-level histograms.

PSNR and SSIM follow the luma-only convention: 3-channel inputs are reduced
to the BT.601 Y plane and scored against a 255 peak. MAE and RMSE are taken
over all channels, also in 0-255 units so magnitudes read like 8-bit pixel
errors. Everything here is pure and stateless.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import quantize_u8, require_image, rgb_to_y

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PEAK = 255.0


def _luma_plane(t: np.ndarray) -> np.ndarray:
    """(H, W) luma in 0-255 units; 1-channel tensors are used directly."""
    t = require_image(t)
    if t.shape[0] == 3:
        plane = rgb_to_y(t)[0]
    elif t.shape[0] == 1:
        plane = t[0]
    else:
        raise ValueError(f"need 1 or 3 channels, got {t.shape[0]}")
    return plane * PEAK


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = require_image(a)
    b = require_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the luma plane; inf when identical."""
    a, b = _check_pair(a, b)
    d = _luma_plane(a) - _luma_plane(b)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean structural similarity over valid Gaussian-weighted windows.

    Luma plane, 255 peak, population (not sample) weighted moments: the
    classic single-scale formulation.
    """
    a, b = _check_pair(a, b)
    x = _luma_plane(a)
    y = _luma_plane(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    kern = _gaussian_kernel(window, SSIM_SIGMA)
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mu_x = np.tensordot(wx, kern, axes=([2, 3], [0, 1]))
    mu_y = np.tensordot(wy, kern, axes=([2, 3], [0, 1]))
    ex2 = np.tensordot(wx * wx, kern, axes=([2, 3], [0, 1]))
    ey2 = np.tensordot(wy * wy, kern, axes=([2, 3], [0, 1]))
    exy = np.tensordot(wx * wy, kern, axes=([2, 3], [0, 1]))
    var_x = ex2 - mu_x * mu_x
    var_y = ey2 - mu_y * mu_y
    cov = exy - mu_x * mu_y
    c1 = (k1 * PEAK) ** 2
    c2 = (k2 * PEAK) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def mae(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute deviation over all channels, 0-255 units."""
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b))) * PEAK


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean squared deviation over all channels, 0-255 units."""
    a, b = _check_pair(a, b)
    d = a - b
    return float(np.sqrt(np.mean(d * d))) * PEAK


def gray_histogram(t: np.ndarray) -> np.ndarray:
    """256-bin count of round-half-up 8-bit luma levels."""
    t = require_image(t)
    plane = rgb_to_y(t) if t.shape[0] == 3 else t
    levels = quantize_u8(plane)
    return np.bincount(levels.ravel(), minlength=256)


@dataclass
class MetricsReport:
    """Pairwise fidelity summary plus both images' gray histograms."""

    psnr_y: float
    ssim: float
    mae: float
    rmse: float
    hist_a: np.ndarray
    hist_b: np.ndarray


def compute_report(a: np.ndarray, b: np.ndarray) -> MetricsReport:
    report = MetricsReport(
        psnr_y=psnr_y(a, b),
        ssim=ssim(a, b),
        mae=mae(a, b),
        rmse=rmse(a, b),
        hist_a=gray_histogram(a),
        hist_b=gray_histogram(b),
    )
    # power-mean inequality; tiny slack covers float rounding
    assert report.rmse >= report.mae - 1e-9
    return report


def report_text(report: MetricsReport) -> str:
    """Flat JSON document; the infinite PSNR sentinel is the string "inf"."""
    payload = {
        "psnr_y": "inf" if math.isinf(report.psnr_y) else report.psnr_y,
        "ssim": report.ssim,
        "mae": report.mae,
        "rmse": report.rmse,
    }
    return json.dumps(payload, indent=2) + "\n"


def histogram_csv(hist_a: np.ndarray, hist_b: np.ndarray | None = None) -> str:
    """bin,count rows; a second histogram adds a column for side-by-side plots."""
    if hist_b is None:
        lines = ["bin,count"] + [f"{k},{int(hist_a[k])}" for k in range(hist_a.size)]
    else:
        lines = ["bin,count_a,count_b"] + [
            f"{k},{int(hist_a[k])},{int(hist_b[k])}" for k in range(hist_a.size)
        ]
    return "\n".join(lines) + "\n"
