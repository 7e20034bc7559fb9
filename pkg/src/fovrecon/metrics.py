"""Raw (pre-logistic) dissimilarity scores between image pairs.

All scores are 0 for identical images and grow with distortion: L2 is plain
MSE; SSIM and MS-SSIM similarities are converted as 1 - similarity; the
perceptual score sums unit-normalized backbone feature distances. SSIM uses
an 11x11 Gaussian window with sigma 1.5; MS-SSIM uses the standard 5-scale
weight vector (scales are reduced with renormalized weights when the image
is too small for five halvings).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from . import features as F
from .errors import ValidationError
from .imaging import ImagePatch

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

METRIC_IDS = ("l2", "ssim", "msssim", "lpips", "calvgg")


def _as_array(img) -> np.ndarray:
    if isinstance(img, ImagePatch):
        return img.to_unit().data
    return np.asarray(img, dtype=np.float64)


def _check_pair(ref, test):
    a, b = _as_array(ref), _as_array(test)
    if a.shape != b.shape:
        raise ValidationError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def l2_score(ref, test) -> float:
    a, b = _check_pair(ref, test)
    return float(((a - b) ** 2).mean())


def _gauss_window(sigma=_SSIM_SIGMA, radius=_SSIM_RADIUS):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _win_filter(arr, k):
    out = correlate1d(arr, k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def _ssim_maps(a, b):
    """Per-pixel luminance and contrast-structure terms (channel-averaged)."""
    k = _gauss_window()
    c1 = (_SSIM_K1) ** 2
    c2 = (_SSIM_K2) ** 2
    mu_a = _win_filter(a, k)
    mu_b = _win_filter(b, k)
    var_a = _win_filter(a * a, k) - mu_a**2
    var_b = _win_filter(b * b, k) - mu_b**2
    cov = _win_filter(a * b, k) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def _crop(arr, pad=_SSIM_RADIUS):
    return arr[pad:-pad, pad:-pad]


def ssim_similarity(ref, test) -> float:
    """Mean SSIM over the window-valid interior, channels averaged."""
    a, b = _check_pair(ref, test)
    if min(a.shape[:2]) <= 2 * _SSIM_RADIUS:
        raise ValidationError("image smaller than the SSIM window")
    lum, cs = _ssim_maps(a, b)
    return float(_crop(lum * cs).mean())


def ssim_score(ref, test) -> float:
    return 1.0 - ssim_similarity(ref, test)


def _downsample2(arr):
    h, w = arr.shape[:2]
    arr = arr[: h - h % 2, : w - w % 2]
    return (arr[0::2, 0::2] + arr[1::2, 0::2] + arr[0::2, 1::2] + arr[1::2, 1::2]) / 4.0


def ms_ssim_similarity(ref, test, weights=MSSSIM_WEIGHTS) -> float:
    """Multi-scale SSIM: contrast-structure at every scale, luminance at the
    coarsest, combined as a weighted geometric mean."""
    a, b = _check_pair(ref, test)
    min_side = min(a.shape[:2])
    max_scales = 1
    while min_side // 2 ** (max_scales) > 2 * _SSIM_RADIUS and max_scales < len(weights):
        max_scales += 1
    w = np.asarray(weights[:max_scales], dtype=np.float64)
    w = w / w.sum()
    score = 1.0
    for scale in range(max_scales):
        lum, cs = _ssim_maps(a, b)
        mean_cs = max(float(_crop(cs).mean()), 1e-9)
        if scale == max_scales - 1:
            mean_lum = max(float(_crop(lum).mean()), 1e-9)
            score *= mean_lum ** w[scale] * mean_cs ** w[scale]
        else:
            score *= mean_cs ** w[scale]
            a, b = _downsample2(a), _downsample2(b)
    return float(score)


def ms_ssim_score(ref, test) -> float:
    return 1.0 - ms_ssim_similarity(ref, test)


def lpips_score(ref, test, net=None, layer_weights=None) -> float:
    """Perceptual feature distance with linear per-layer weights (uniform
    when none are supplied)."""
    _check_pair(ref, test)
    dists = F.layer_distances(ref, test, F.PERCEPTUAL_LAYERS, net)
    if layer_weights is None:
        layer_weights = {name: 1.0 for name in dists}
    return float(sum(layer_weights[n] * float(dists[n].detach()) for n in dists))


def calvgg_score(ref, test, layer_weights=None, layers=None, net=None) -> float:
    """Weighted sum of calibration-layer distances; the raw score behind the
    calibrated metric. Uniform weights when none are given."""
    _check_pair(ref, test)
    layers = tuple(layers or F.CALIBRATION_LAYERS)
    dists = F.layer_distances(ref, test, layers, net)
    if layer_weights is None:
        layer_weights = {name: 1.0 for name in layers}
    return float(sum(layer_weights.get(n, 0.0) * float(dists[n].detach()) for n in layers))


def metric_score(metric_id: str, ref, test, net=None, layer_weights=None) -> float:
    """Raw dissimilarity under the named metric; 0 for identical images."""
    if metric_id not in METRIC_IDS:
        raise ValidationError(f"unknown metric {metric_id!r}; choose from {METRIC_IDS}")
    if metric_id == "l2":
        return l2_score(ref, test)
    if metric_id == "ssim":
        return ssim_score(ref, test)
    if metric_id == "msssim":
        return ms_ssim_score(ref, test)
    if metric_id == "lpips":
        return lpips_score(ref, test, net=net, layer_weights=layer_weights)
    return calvgg_score(ref, test, layer_weights=layer_weights, net=net)
