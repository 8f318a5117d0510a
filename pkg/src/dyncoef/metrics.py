"""Image quality metrics on ``[0, 1]`` images."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 120.0


def psnr(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    return psnr_from_mse(mse)


def psnr_from_mse(mse: float) -> float:
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(pred, gt, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean single-scale SSIM over valid window positions, averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if min(pred.shape[:2]) < window:
        raise ValueError(f"images must be at least {window} pixels on each side")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    win = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(pred.shape[2]):
        a, b = pred[..., ch], gt[..., ch]
        mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
        var_a = _filter_valid(a * a, win) - mu_a**2
        var_b = _filter_valid(b * b, win) - mu_b**2
        cov = _filter_valid(a * b, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
