"""Adversarial and reconstruction losses.

Six generator-loss variants exist: {L2, perceptual, Laplacian} reconstruction
terms, each combinable with the standard critic (trained on natural images)
or the perception-aware critic (trained on the distorted manifold). The
variant only changes bookkeeping for the generator formula; the critic's
real-sample source is what differs between the two adversarial modes.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as TF

from .. import features as F
from ..errors import ValidationError

GENERATOR_VARIANTS = ("l2", "l2_ours", "lpips", "lpips_ours", "lapl", "lapl_ours")

# 5-tap binomial kernel, matching the NumPy pyramid in fovrecon.imaging.
_PYR_K = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def critic_loss(critic, x_target, x_fake):
    """Wasserstein surrogate D(x_target) - D(x_fake), batch-averaged.

    ``x_target`` comes from natural images in the standard mode or from the
    near-threshold-distorted manifold in the perception-aware mode; the
    critic maximizes this value (the training loop minimizes its negation).
    """
    if x_target.shape != x_fake.shape:
        raise ValidationError("critic_loss inputs must share shapes")
    return critic(x_target).mean() - critic(x_fake).mean()


def gradient_penalty(critic, x_target, x_fake, gp_weight: float, generator=None):
    """gp_weight * E[(||grad D(x_hat)||_2 - 1)^2] at random convex
    interpolates x_hat between target and fake samples."""
    if x_target.shape != x_fake.shape:
        raise ValidationError("gradient_penalty inputs must share shapes")
    norms = _interpolate_norms(critic, x_target, x_fake, generator)
    return gp_weight * ((norms - 1.0) ** 2).mean()


def interpolate_gradient_norm(critic, x_target, x_fake, generator=None) -> float:
    """Diagnostic: mean gradient norm at the interpolates (Lipschitz probe)."""
    return float(_interpolate_norms(critic, x_target, x_fake, generator).mean().detach())


def _interpolate_norms(critic, x_target, x_fake, generator=None):
    b = x_target.shape[0]
    eps = torch.rand(b, 1, 1, 1, generator=generator, dtype=x_target.dtype,
                     device=x_target.device)
    x_hat = (eps * x_target + (1.0 - eps) * x_fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    if not scores.requires_grad:  # critic ignores its input: gradient is zero
        return torch.zeros(b, dtype=x_target.dtype, device=x_target.device)
    grads = torch.autograd.grad(scores.sum(), x_hat, create_graph=True,
                                allow_unused=True)[0]
    if grads is None:
        grads = torch.zeros_like(x_hat)
    return grads.flatten(1).norm(dim=1)


def gaussian_level_weights(peak_level: int, sigma: float = 1.0, n_levels: int = 5) -> np.ndarray:
    """Per-level weights proportional to exp(-(l - peak)^2 / (2 sigma^2)),
    normalized to sum 1."""
    if not 0 <= peak_level < n_levels:
        raise ValidationError("peak_level must satisfy 0 <= peak < n_levels")
    levels = np.arange(n_levels, dtype=np.float64)
    w = np.exp(-((levels - peak_level) ** 2) / (2.0 * sigma**2))
    return w / w.sum()


def _sym_pad(x, pad: int):
    """Symmetric (edge-inclusive) padding on both spatial axes, matching
    scipy's 'reflect' mode used by the NumPy pyramid."""
    left = x[:, :, :, :pad].flip(3)
    right = x[:, :, :, -pad:].flip(3)
    x = torch.cat([left, x, right], dim=3)
    top = x[:, :, :pad, :].flip(2)
    bottom = x[:, :, -pad:, :].flip(2)
    return torch.cat([top, x, bottom], dim=2)


def _sep_conv(x, k1d):
    c = x.shape[1]
    kh = k1d.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = k1d.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    x = _sym_pad(x, (k1d.numel() - 1) // 2)
    x = TF.conv2d(x, kh, groups=c)
    return TF.conv2d(x, kw, groups=c)


def pyr_down_t(x):
    return _sep_conv(x, _PYR_K.to(x.dtype))[:, :, ::2, ::2]


def _up_axis_t(x, target, axis):
    """Torch twin of the NumPy even/odd-phase upsampler (axis 2 or 3)."""
    first = x.narrow(axis, 0, 1)
    last = x.narrow(axis, x.shape[axis] - 1, 1)
    xp = torch.cat([first, x, last], dim=axis)
    n = x.shape[axis]
    even = (
        0.125 * xp.narrow(axis, 0, n)
        + 0.75 * xp.narrow(axis, 1, n)
        + 0.125 * xp.narrow(axis, 2, n)
    )
    n_odd = target - n
    odd = 0.5 * (xp.narrow(axis, 1, n_odd) + xp.narrow(axis, 2, n_odd))
    shape = list(x.shape)
    shape[axis] = target
    out = torch.zeros(shape, dtype=x.dtype, device=x.device)
    index_even = torch.arange(0, target, 2, device=x.device)
    index_odd = torch.arange(1, target, 2, device=x.device)
    out = out.index_copy(axis, index_even, even.narrow(axis, 0, target - n_odd))
    out = out.index_copy(axis, index_odd, odd)
    return out


def pyr_up_t(x, target_hw):
    th, tw = target_hw
    return _up_axis_t(_up_axis_t(x, th, 2), tw, 3)


def laplacian_levels_t(x, n_levels: int):
    """Torch twin of the NumPy pyramid: n_levels - 1 bands + residual."""
    gauss = [x]
    for _ in range(n_levels - 1):
        gauss.append(pyr_down_t(gauss[-1]))
    levels = []
    for l in range(n_levels - 1):
        levels.append(gauss[l] - pyr_up_t(gauss[l + 1], gauss[l].shape[2:]))
    levels.append(gauss[n_levels - 1])
    return levels


def laplacian_loss(recon, target, level_weights):
    """Weighted sum of per-level MSE between the Laplacian pyramids.

    The residual counts as the last level, so the loss is zero iff the
    images are equal (the pyramid is invertible).
    """
    if recon.shape != target.shape:
        raise ValidationError("laplacian_loss inputs must share shapes")
    n_levels = len(level_weights)
    la = laplacian_levels_t(recon, n_levels)
    lb = laplacian_levels_t(target, n_levels)
    total = None
    for w, a, b in zip(level_weights, la, lb):
        term = float(w) * TF.mse_loss(a, b)
        total = term if total is None else total + term
    return total


def perceptual_loss(recon, target, net=None, layer_set=F.PERCEPTUAL_LAYERS):
    """LPIPS-style distance: unit-normalized backbone features, squared
    differences averaged spatially, summed over layers (batch mean)."""
    if recon.shape != target.shape:
        raise ValidationError("perceptual_loss inputs must share shapes")
    net = net or F.backbone()
    fa = net(recon, layer_set)
    fb = net(target, layer_set)
    total = None
    for name in layer_set:
        da = F._unit_normalize(fa[name].transpose(0, 1)).transpose(0, 1)
        db = F._unit_normalize(fb[name].transpose(0, 1)).transpose(0, 1)
        term = ((da - db) ** 2).sum(dim=1).mean()
        total = term if total is None else total + term
    return total


def generator_loss(variant: str, recon, target, critic_score, *, weights=None,
                   level_weights=None, net=None):
    """Weighted reconstruction term plus the adversarial term -D(G(z)).

    ``weights`` maps {'l2','lpips','lapl','adv'} to coefficients (defaults:
    2000 / 100 / 100 / 1). ``critic_score`` is the critic's mean score of
    the reconstructions. Returns (total, reconstruction_term).
    """
    if variant not in GENERATOR_VARIANTS:
        raise ValidationError(f"unknown generator-loss variant {variant!r}")
    w = {"l2": 2000.0, "lpips": 100.0, "lapl": 100.0, "adv": 1.0}
    if weights:
        w.update(weights)
    kind = variant.split("_")[0]
    if kind == "l2":
        recon_term = w["l2"] * TF.mse_loss(recon, target)
    elif kind == "lpips":
        recon_term = w["lpips"] * perceptual_loss(recon, target, net=net)
    else:
        if level_weights is None:
            level_weights = gaussian_level_weights(0, 1.0, 5)
        recon_term = w["lapl"] * laplacian_loss(recon, target, level_weights)
    if not torch.is_tensor(critic_score):
        critic_score = torch.as_tensor(float(critic_score))
    total = recon_term + w["adv"] * (-critic_score)
    return total, recon_term
