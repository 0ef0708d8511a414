"""Image and point-cloud quality metrics.

Pure array-in, number-out functions; no model or dataset knowledge.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
FSCORE_THRESHOLD = 0.05


def psnr(pred, gt, peak=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99 for exact matches."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP)


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _windowed_mean(img, kernel):
    """Separable Gaussian filter, cropped to windows fully inside the image."""
    half = len(kernel) // 2
    tmp = correlate1d(img, kernel, axis=0, mode="constant")
    tmp = correlate1d(tmp, kernel, axis=1, mode="constant")
    return tmp[half:-half, half:-half]


def ssim(pred, gt, peak=1.0):
    """Structural similarity over valid 11x11 Gaussian windows (one channel)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim != 2:
        raise ValueError("ssim expects single-channel 2-D images")
    if min(pred.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = _gaussian_kernel()
    c1 = SSIM_C1 * peak * peak
    c2 = SSIM_C2 * peak * peak
    mu1 = _windowed_mean(pred, k)
    mu2 = _windowed_mean(gt, k)
    s11 = _windowed_mean(pred * pred, k) - mu1 * mu1
    s22 = _windowed_mean(gt * gt, k) - mu2 * mu2
    s12 = _windowed_mean(pred * gt, k) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def ssim_rgb(pred, gt, peak=1.0):
    """Mean of per-channel SSIM for (H, W, 3) images."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"expected matching (H, W, C) images, got {pred.shape} vs {gt.shape}")
    return float(np.mean([ssim(pred[..., c], gt[..., c], peak) for c in range(pred.shape[2])]))


def chamfer(a, b):
    """Symmetric chamfer distance: mean of both directed mean-NN distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs non-empty clouds")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def fscore(pred, gt, threshold=FSCORE_THRESHOLD):
    """Harmonic mean of NN precision/recall at a distance threshold."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("f-score needs non-empty clouds")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    precision = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def intensity_mae(pred, gt, valid):
    """Mean absolute intensity error over rays that actually returned."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid returns to score")
    pred = np.asarray(pred, dtype=np.float64)[valid]
    gt = np.asarray(gt, dtype=np.float64)[valid]
    return float(np.mean(np.abs(pred - gt)))


def depth_rmse(pred, gt, valid):
    """Root-mean-square range error over valid returns (diagnostic)."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid returns to score")
    pred = np.asarray(pred, dtype=np.float64)[valid]
    gt = np.asarray(gt, dtype=np.float64)[valid]
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def drop_accuracy(pred_prob, gt_flag, threshold=0.5):
    """Fraction of rays whose thresholded drop prediction matches truth."""
    pred = np.asarray(pred_prob) > threshold
    gt = np.asarray(gt_flag) > 0.5
    return float(np.mean(pred == gt))
