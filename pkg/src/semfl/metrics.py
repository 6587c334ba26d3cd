"""Segmentation and reconstruction metrics.

All image metrics work on pixels in [0, 1]. PSNR uses MAX = 1. SSIM is the
Gaussian-window form (11x11 taps, sigma 1.5, K1 = 0.01, K2 = 0.03) averaged
over the fully-covered interior of the image.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.metrics import structural_similarity

BINARIZE_THRESHOLD = 0.5
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03
RESEGMENT_SIGMA = 1.0


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    mse: float
    psnr: float
    ssim: float
    iou: float | None = None
    context: str = "reconstruction_eval"  # segmentation_eval | reconstruction_eval
    preprocessing: str = "none"  # none | unsupervised_resegmentation
    degenerate: bool = False

    def to_json(self) -> dict:
        d = asdict(self)
        if math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")


def binarize(pred, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    return (_np(pred) >= threshold).astype(np.uint8)


def iou(pred_mask, truth, threshold: float = BINARIZE_THRESHOLD) -> float:
    """Jaccard index; probability maps are binarized at ``threshold`` first."""
    p, t = binarize(pred_mask, threshold).astype(bool), _np(truth) >= 0.5
    _same_shape(p, t)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def normalize01(image) -> np.ndarray:
    """Pass [0, 1] images through; min-max rescale anything else (e.g. 8-bit)."""
    a = _np(image)
    if a.size and (a.min() < 0 or a.max() > 1):
        if a.max() > 1 and a.min() >= 0 and a.max() <= 255 and np.allclose(a, np.round(a)):
            return a / 255.0
        lo, hi = a.min(), a.max()
        return np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    return a


def mse_norm(a, b) -> float:
    x, y = _np(a), _np(b)
    _same_shape(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(mse: float) -> float:
    if mse < 0:
        raise MetricsError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b, data_range: float = 1.0) -> float:
    x, y = _np(a), _np(b)
    _same_shape(x, y)
    win = 2 * SSIM_RADIUS + 1
    if x.ndim != 2 or min(x.shape) < win:
        raise MetricsError(f"ssim needs 2-D images of at least {win}x{win}, got {x.shape}")
    value = structural_similarity(
        x,
        y,
        data_range=data_range,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
    )
    return float(np.clip(value, -1.0, 1.0))


# --------------------------------------------------------------------------- #
# Unsupervised re-segmentation (smoothing + Otsu)
# --------------------------------------------------------------------------- #
class Resegmentation(NamedTuple):
    mask: np.ndarray
    threshold: float
    degenerate: bool


def otsu_threshold(values, bins: int = 256) -> float:
    """Otsu threshold; values strictly above it are foreground."""
    v = _np(values).ravel()
    if v.max() == v.min():
        raise MetricsError("constant input has no Otsu threshold")
    return float(threshold_otsu(v, nbins=bins))


def unsupervised_resegment(image, sigma: float = RESEGMENT_SIGMA) -> Resegmentation:
    """Foreground map of a noisy grayscale image with no training data.

    Gaussian smoothing followed by a global Otsu threshold. A constant image
    yields an all-background map flagged ``degenerate``.
    """
    a = normalize01(image)
    smooth = ndimage.gaussian_filter(a, sigma=sigma, mode="reflect") if sigma > 0 else a
    if np.ptp(smooth) <= 1e-12:
        return Resegmentation(np.zeros(a.shape, dtype=np.uint8), float("nan"), True)
    t = otsu_threshold(smooth)
    return Resegmentation((smooth > t).astype(np.uint8), t, False)


# --------------------------------------------------------------------------- #
# Composite evaluations
# --------------------------------------------------------------------------- #
def evaluate_reconstruction(recon, original) -> MetricsReport:
    """MSE/PSNR on raw normalized pixels; SSIM of the re-segmented recon vs the true mask."""
    r = normalize01(recon)
    _same_shape(r, original.image)
    mse = mse_norm(r, original.image)
    seg = unsupervised_resegment(r)
    return MetricsReport(
        mse=mse,
        psnr=psnr(mse),
        ssim=ssim(seg.mask.astype(np.float64), original.mask.astype(np.float64)),
        iou=iou(seg.mask, original.mask),
        context="reconstruction_eval",
        preprocessing="unsupervised_resegmentation",
        degenerate=seg.degenerate,
    )


def evaluate_prediction(prob_map, mask) -> MetricsReport:
    """Segmentation-context metrics of one probability map vs its ground-truth mask."""
    p, m = _np(prob_map), _np(mask)
    mse = mse_norm(p, m)
    return MetricsReport(
        mse=mse,
        psnr=psnr(mse),
        ssim=ssim(p, m),
        iou=iou(p, m),
        context="segmentation_eval",
        preprocessing="none",
    )


def evaluate_segmentation(weights, samples) -> dict[str, float]:
    """Mean hold-out loss, IoU, MSE and SSIM of a model over ``samples``."""
    from .model import forward_logits, logits_loss, stack_batch

    images, masks = stack_batch(samples, weights.spec)
    with torch.no_grad():
        logits = forward_logits(weights, images)
        loss = float(logits_loss(logits, masks))
        probs = torch.sigmoid(logits)[:, 0].numpy()
    reports = [evaluate_prediction(p, s.mask) for p, s in zip(probs, samples)]
    return {
        "loss": loss,
        "iou": float(np.mean([r.iou for r in reports])),
        "mse": float(np.mean([r.mse for r in reports])),
        "ssim": float(np.mean([r.ssim for r in reports])),
    }
