"""Constrained texture synthesis producing near-threshold-distorted patches.

An image is optimized by first-order adaptive gradient descent so that its
Gram statistics match an exemplar's, while a random subset of pixels (the
"guiding samples", p% of the image) is held exactly equal to the exemplar
by projection after every step. Two mitigation strategies exist for the
checkerboard artifacts this constrained optimization produces:

* strategy A: run constrained to convergence, low-pass the result
  (sigma = 1 by default), then run a second, unconstrained round;
* strategy B: run constrained, but initialized from a Gaussian-filtered
  version of the guiding samples instead of noise.

With p = 0 both collapse to plain statistics-matching synthesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import features as F
from .errors import ValidationError
from .imaging import ImagePatch, gaussian_blur, _blur_array
from .sampling import SamplingMask

_CONVERGENCE_WINDOW = 50


@dataclass(frozen=True)
class SynthesisConfig:
    guiding_percent: float = 0.0
    strategy: str = "A"            # "A" two-stage, "B" blur-initialized
    max_iters: int = 1000          # stage-1 / single-stage budget
    stage2_iters: int = 500
    step_size: float = 0.02
    # the unconstrained refinement takes smaller steps from its blurred
    # initialization so it does not re-introduce the artifacts it removes
    stage2_step_scale: float = 0.25
    blur_sigma: float = 1.0
    seed: int = 0
    convergence_tol: float = 1e-4
    layer_set: tuple = F.STYLE_LAYERS
    layer_weights: dict | None = None

    def __post_init__(self):
        if not 0 <= self.guiding_percent <= 100:
            raise ValidationError("guiding_percent must be in [0, 100]")
        if self.strategy not in ("A", "B"):
            raise ValidationError(f"strategy must be 'A' or 'B', got {self.strategy!r}")
        if self.max_iters < 1 or self.stage2_iters < 0:
            raise ValidationError("iteration budgets must be positive")


@dataclass(frozen=True)
class SynthesisResult:
    image: ImagePatch
    stage1: ImagePatch | None      # strategy A only: the constrained pre-blur result
    guiding_mask: SamplingMask
    converged: bool
    initial_loss: float
    final_loss: float
    loss_history: tuple


def select_guiding_samples(exemplar: ImagePatch, percent: float, seed: int) -> SamplingMask:
    """Uniform-random pixel subset of exactly round(p/100 * H * W) positions."""
    if not 0 <= percent <= 100:
        raise ValidationError("percent must be in [0, 100]")
    h, w = exemplar.height, exemplar.width
    count = int(round(percent / 100.0 * h * w))
    rng = np.random.default_rng(seed)
    flat = np.zeros(h * w, dtype=bool)
    if count:
        flat[rng.choice(h * w, size=count, replace=False)] = True
    return SamplingMask(bits=flat.reshape(h, w), rate=percent / 100.0, seed=seed)


def project_constraint(img: ImagePatch, exemplar: ImagePatch, mask: SamplingMask) -> ImagePatch:
    """Stamp exemplar pixels at mask positions; identity elsewhere. Idempotent."""
    if (img.height, img.width) != (exemplar.height, exemplar.width):
        raise ValidationError("image and exemplar dimensions differ")
    if mask.bits.shape != (img.height, img.width):
        raise ValidationError("mask and image dimensions differ")
    out = np.where(mask.bits[..., None], exemplar.data, img.data)
    return ImagePatch(out, "unit")


def checkerboard_energy(img) -> float:
    """Mean squared response to the 2x2 kernel [[+1,-1],[-1,+1]]/4.

    Zero on constants and smooth ramps; 1.0 on a perfect +-1 checkerboard.
    Accepts an ImagePatch or a plain 2-D/3-D array.
    """
    arr = img.data if isinstance(img, ImagePatch) else np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    resp = (arr[:-1, :-1] - arr[:-1, 1:] - arr[1:, :-1] + arr[1:, 1:]) / 4.0
    return float((resp**2).mean())


def _noise_init(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)


def _blur_init(exemplar: ImagePatch, mask: SamplingMask, sigma: float, seed: int) -> np.ndarray:
    """Gaussian-filtered guiding samples via normalized convolution;
    positions with no sample support fall back to the noise init."""
    if mask.n_samples == 0:
        return _noise_init(exemplar.data.shape, seed)
    m = mask.bits.astype(np.float64)
    num = _blur_array(exemplar.data * m[..., None], sigma)
    den = _blur_array(m, sigma)[..., None]
    noise = _noise_init(exemplar.data.shape, seed)
    with np.errstate(invalid="ignore"):
        filled = np.where(den > 1e-8, num / np.maximum(den, 1e-12), noise)
    return np.clip(filled, 0.0, 1.0)


def _converged(history, tol: float) -> bool:
    if len(history) <= _CONVERGENCE_WINDOW:
        return False
    prev = history[-1 - _CONVERGENCE_WINDOW]
    return (prev - history[-1]) / max(prev, 1e-30) < tol


def _optimize(start: np.ndarray, target: F.GramSet, cfg: SynthesisConfig, n_iters: int,
              net, stamp=None):
    """Adam on the pixels against the Gram target; clamp (and project, when
    ``stamp`` = (exemplar_data, mask_bits)) after every step."""
    x = torch.from_numpy(start.transpose(2, 0, 1).copy()).float()
    x = x.unsqueeze(0).requires_grad_(True)
    if stamp is not None:
        exemplar_data, bits = stamp
        stamp_vals = torch.from_numpy(
            exemplar_data.transpose(2, 0, 1).copy()
        ).float().unsqueeze(0)
        stamp_bits = torch.from_numpy(bits).unsqueeze(0).unsqueeze(0)
        with torch.no_grad():
            x.data = torch.where(stamp_bits, stamp_vals, x.data)
    opt = torch.optim.Adam([x], lr=cfg.step_size)
    history = []
    best_loss, best_img = math.inf, start
    converged = False
    for _ in range(n_iters):
        opt.zero_grad()
        feats = F.extract_features(x, cfg.layer_set, net)
        loss = F.gram_loss(F.gram_matrices(feats), target, cfg.layer_weights)
        loss.backward()
        opt.step()
        with torch.no_grad():
            x.data.clamp_(0.0, 1.0)
            if stamp is not None:
                x.data = torch.where(stamp_bits, stamp_vals, x.data)
        history.append(float(loss.detach()))
        if history[-1] < best_loss:
            best_loss = history[-1]
            best_img = x.detach()[0].numpy().transpose(1, 2, 0).astype(np.float64)
        if _converged(history, cfg.convergence_tol):
            converged = True
            break
    final = x.detach()[0].numpy().transpose(1, 2, 0).astype(np.float64)
    if history and history[-1] > best_loss:
        final = best_img
    if stamp is not None:
        # re-stamp in float64 so the constraint holds to full precision
        final = np.where(stamp[1][..., None], stamp[0], final)
    return np.clip(final, 0.0, 1.0), history, converged


def synthesize(exemplar: ImagePatch, cfg: SynthesisConfig, net=None) -> SynthesisResult:
    """Produce a distorted patch matching the exemplar's Gram statistics.

    Deterministic for a fixed (exemplar, cfg). Non-convergence within the
    iteration budget is reported through ``converged``, not raised; the
    best iterate is returned.
    """
    net = net or F.backbone()
    mask = select_guiding_samples(exemplar, cfg.guiding_percent, cfg.seed)
    target = F.gram_matrices(F.extract_features(exemplar, cfg.layer_set, net))
    stamp = (exemplar.data, np.array(mask.bits)) if mask.n_samples else None

    if cfg.strategy == "B":
        start = _blur_init(exemplar, mask, cfg.blur_sigma, cfg.seed)
        final, history, converged = _optimize(start, target, cfg, cfg.max_iters, net, stamp)
        return SynthesisResult(
            image=ImagePatch(final), stage1=None, guiding_mask=mask,
            converged=converged, initial_loss=history[0], final_loss=history[-1],
            loss_history=tuple(history),
        )

    # strategy A: constrained stage, low-pass, unconstrained stage
    start = _noise_init(exemplar.data.shape, cfg.seed)
    stage1_arr, hist1, conv1 = _optimize(start, target, cfg, cfg.max_iters, net, stamp)
    stage1 = ImagePatch(stage1_arr)
    blurred = gaussian_blur(stage1, cfg.blur_sigma)
    cfg2 = replace(cfg, step_size=cfg.step_size * cfg.stage2_step_scale)
    final, hist2, conv2 = _optimize(blurred.data, target, cfg2, cfg.stage2_iters, net, None)
    history = tuple(hist1) + tuple(hist2)
    return SynthesisResult(
        image=ImagePatch(final), stage1=stage1, guiding_mask=mask,
        converged=conv1 and (conv2 or cfg.stage2_iters == 0),
        initial_loss=hist1[0], final_loss=history[-1], loss_history=history,
    )


def batch_synthesize(exemplar_paths, cfg: SynthesisConfig, out_dir, region_percents,
                     manifest=None, net=None, seed_base: int | None = None):
    """Synthesize one patch per (exemplar, region) pair into ``out_dir``.

    ``region_percents`` maps region name -> guiding percent. Existing
    manifest entries are skipped, so interrupted builds resume cleanly.
    Returns (new_entries, n_failed); unreadable exemplars are skipped and
    counted.
    """
    import os
    from pathlib import Path

    from .imaging import load_png, save_png
    from .manifest import ManifestEntry

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = net or F.backbone()
    seed_base = cfg.seed if seed_base is None else seed_base
    manifest_root = manifest.path.parent if (manifest is not None and manifest.path) else out_dir
    existing = set()
    if manifest is not None:
        existing = {(e.source_image, e.region, e.kind) for e in manifest.entries}

    entries, n_failed = [], 0
    for path in sorted(Path(p) for p in exemplar_paths):
        for region, percent in region_percents.items():
            key = (path.name, region, "distorted")
            if key in existing:
                continue
            try:
                exemplar = load_png(path)
            except Exception:
                n_failed += 1
                break
            seed = _entry_seed(seed_base, path.name, region)
            run_cfg = replace(cfg, guiding_percent=percent, seed=seed)
            result = synthesize(exemplar, run_cfg, net=net)
            out_path = out_dir / f"{path.stem}__{region}__p{percent:g}.png"
            save_png(result.image, out_path)
            entry = ManifestEntry(
                patch_path=os.path.relpath(out_path, manifest_root),
                source_image=path.name,
                crop_offset=(0, 0), region=region, kind="distorted",
                rate_or_percent=percent, strategy=cfg.strategy, seed=seed,
            )
            entries.append(entry)
            if manifest is not None:
                manifest.append(entry)
    return entries, n_failed


def _entry_seed(base: int, name: str, region: str) -> int:
    import zlib

    return (base + zlib.crc32(f"{name}|{region}".encode())) % (2**31)
