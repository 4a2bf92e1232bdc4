"""Full-reference image quality metrics on ``[0, 1]`` images."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
VI_LEVELS = 256


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; exact matches report 99.0."""
    pred, gt = _pair(pred, gt)
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> float:
    C1 = (SSIM_K1 * 1.0) ** 2
    C2 = (SSIM_K2 * 1.0) ** 2
    r = window.shape[0] // 2

    def filt(img):
        return ndimage.correlate(img, window, mode="constant")[r:-r, r:-r]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x ** 2 + mu_y ** 2 + C1) * (sxx + syy + C2)
    return float(np.mean(num / den))


def ssim(pred, gt) -> float:
    """Gaussian-windowed SSIM (11x11, std 1.5) averaged over valid windows and channels."""
    pred, gt = _pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {pred.shape[:2]}")
    window = gaussian_window()
    return float(np.mean([_ssim_channel(pred[..., c], gt[..., c], window) for c in range(pred.shape[2])]))


def nrmse(pred, gt) -> float:
    """RMSE normalized by the ground-truth range (1.0 when the ground truth is constant)."""
    pred, gt = _pair(pred, gt)
    rmse = np.sqrt(np.mean((pred - gt) ** 2))
    span = gt.max() - gt.min()
    return float(rmse / (span if span > 0 else 1.0))


def quantize(img: np.ndarray, levels: int = VI_LEVELS) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * (levels - 1)), 0, levels - 1).astype(np.int64)


def _plogp(counts: np.ndarray, total: int) -> list:
    p = counts[counts > 0] / total
    return (p * np.log(p)).tolist()


def vi(pred, gt) -> float:
    """Variation of information (nats) between the 256-level intensity partitions."""
    pred, gt = _pair(pred, gt)
    a = quantize(pred).ravel()
    b = quantize(gt).ravel()
    n = a.size
    joint = np.bincount(a * VI_LEVELS + b, minlength=VI_LEVELS ** 2)
    # VI = H(A) + H(B) - 2 I(A;B) = 2 H(A,B) - H(A) - H(B); fsum is correctly rounded,
    # so the result does not depend on term order and vi(a, b) == vi(b, a) exactly
    terms = [-2.0 * t for t in _plogp(joint, n)]
    terms += _plogp(np.bincount(a, minlength=VI_LEVELS), n)
    terms += _plogp(np.bincount(b, minlength=VI_LEVELS), n)
    return max(math.fsum(terms), 0.0)


METRICS = {"psnr": psnr, "ssim": ssim, "nrmse": nrmse, "vi": vi}
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "nrmse": False, "vi": False}
