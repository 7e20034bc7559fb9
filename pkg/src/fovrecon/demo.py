"""Procedural demo imagery: ten deterministic textures (gratings, bricks,
cellular patterns, filtered noise) so smoke runs and examples work without
any external image corpus."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import ImagePatch, _blur_array, save_png


def brick_texture(size: int = 64, seed: int = 0, noise: float = 0.01) -> ImagePatch:
    """Offset-brick pattern with mortar lines; a classic synthesis exemplar."""
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size, 3))
    bh, bw = max(4, size // 8), max(8, size // 4)
    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    row = ys // bh
    bx = (xs + (row % 2) * (bw // 2)) % bw
    mortar = (ys % bh == 0) | (bx == 0)
    base = np.where(mortar, 0.85, 0.45)
    img[..., 0] = base
    img[..., 1] = base * 0.75
    img[..., 2] = base * 0.65
    img += rng.normal(0.0, noise, img.shape)
    return ImagePatch(np.clip(img, 0.0, 1.0))


def _cellular(size, rng, n_cells=24):
    pts = rng.uniform(0, size, size=(n_cells, 2))
    colors = rng.uniform(0.15, 0.9, size=(n_cells, 3))
    ys, xs = np.mgrid[0:size, 0:size]
    d2 = (ys[..., None] - pts[:, 0]) ** 2 + (xs[..., None] - pts[:, 1]) ** 2
    return colors[np.argmin(d2, axis=-1)]


def _noise_octaves(size, rng, octaves=4):
    img = np.zeros((size, size, 3))
    for o in range(octaves):
        sigma = size / 2 ** (o + 2)
        layer = rng.normal(0, 1.0, (size, size, 3))
        img += _blur_array(layer, max(sigma, 0.6)) * 2.0**o
    img -= img.min()
    return img / max(img.max(), 1e-9)


def _grating(size, rng):
    ys, xs = np.mgrid[0:size, 0:size]
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(4, 12) / size
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.45 * np.sin(2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
    tint = rng.uniform(0.5, 1.0, 3)
    return wave[..., None] * tint


def demo_image(size: int = 320, seed: int = 0) -> ImagePatch:
    """One deterministic composite texture; varies qualitatively with seed."""
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:
        arr = _cellular(size, rng)
        arr = 0.7 * arr + 0.3 * _noise_octaves(size, rng)
    elif kind == 1:
        arr = np.asarray(brick_texture(size, seed, noise=0.02).data)
    elif kind == 2:
        arr = _grating(size, rng)
        arr = 0.8 * arr + 0.2 * _cellular(size, rng)
    else:
        arr = _noise_octaves(size, rng)
        arr = 0.6 * arr + 0.4 * _grating(size, rng)
    return ImagePatch(np.clip(arr, 0.0, 1.0))


def make_demo_images(out_dir, n: int = 10, size: int = 320, seed: int = 0) -> list:
    """Write n deterministic PNGs into ``out_dir``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        path = out / f"demo_{i:02d}.png"
        save_png(demo_image(size=size, seed=seed + i), path)
        paths.append(path)
    return paths
