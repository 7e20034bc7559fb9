"""Blue-noise sampling masks, sparse subsampling, and scattered-sample
densification.

Masks come from a void-and-cluster rank matrix (Ulichney-style swaps on a
torus with a Gaussian energy kernel); the rank matrix is computed once per
(shape, seed) and thresholded per rate. Densification uses a pull-push
scheme over the sample weights followed by a few constrained relaxation
sweeps, which reduces to plain bilinear interpolation on regular grids and
handles arbitrary masks; sample positions are re-stamped exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import _kernels
from .errors import ValidationError
from .imaging import ImagePatch

_VAC_SIGMA = 1.5

# rank matrices are expensive; memoize per (h, w, sigma, seed)
_rank_cache: dict = {}


@dataclass(frozen=True)
class SamplingMask:
    """Binary sample mask with its nominal rate and generating seed."""

    bits: np.ndarray
    rate: float
    seed: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValidationError("mask must be 2-D")
        expected = int(round(self.rate * bits.size))
        if int(bits.sum()) != expected:
            raise ValidationError(
                f"mask popcount {int(bits.sum())} != round(rate * size) = {expected}"
            )
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def n_samples(self) -> int:
        return int(self.bits.sum())


def rank_matrix(height: int, width: int, seed: int = 0) -> np.ndarray:
    key = (height, width, _VAC_SIGMA, seed)
    if key not in _rank_cache:
        _rank_cache[key] = _kernels.rank_matrix(height, width, sigma=_VAC_SIGMA, seed=seed)
    return _rank_cache[key]


def void_and_cluster_mask(height: int, width: int, rate: float, seed: int = 0) -> SamplingMask:
    """Blue-noise mask with exactly round(rate * height * width) samples.

    Deterministic for a fixed (shape, rate, seed); any rate in (0, 1] can be
    thresholded from the same cached rank matrix.
    """
    if not 0 < rate <= 1:
        raise ValidationError(f"rate must be in (0, 1], got {rate}")
    count = int(round(rate * height * width))
    bits = rank_matrix(height, width, seed) < count
    return SamplingMask(bits=bits, rate=rate, seed=seed)


def random_mask(height: int, width: int, rate: float, seed: int = 0) -> SamplingMask:
    """Uniform-random mask of the same popcount; the blue-noise baseline."""
    if not 0 < rate <= 1:
        raise ValidationError(f"rate must be in (0, 1], got {rate}")
    count = int(round(rate * height * width))
    rng = np.random.default_rng(seed)
    flat = np.zeros(height * width, dtype=bool)
    flat[rng.choice(height * width, size=count, replace=False)] = True
    return SamplingMask(bits=flat.reshape(height, width), rate=rate, seed=seed)


def save_mask_png(mask: SamplingMask, path) -> None:
    """Store mask bits as a 1-bit PNG."""
    Image.fromarray(mask.bits).convert("1").save(path)


def load_mask_png(path, rate: float, seed: int) -> SamplingMask:
    with Image.open(path) as im:
        bits = np.asarray(im.convert("1"), dtype=bool)
    return SamplingMask(bits=bits, rate=rate, seed=seed)


@dataclass(frozen=True)
class SparseImage:
    """Dense values array paired with the mask of defined positions.

    Values outside the mask are zero-filled and carry no meaning.
    """

    values: np.ndarray
    mask: SamplingMask


def subsample(img: ImagePatch, mask: SamplingMask) -> SparseImage:
    """Keep image values at mask positions; everything else is undefined."""
    if mask.bits.shape != (img.height, img.width):
        raise ValidationError("mask and image dimensions differ")
    values = img.data * mask.bits[..., None]
    return SparseImage(values=values, mask=mask)


def _block_sum(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = h + (h % 2), w + (w % 2)
    if (ph, pw) != (h, w):
        pad = [(0, ph - h), (0, pw - w)] + [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, pad)
    return (
        arr[0::2, 0::2] + arr[1::2, 0::2] + arr[0::2, 1::2] + arr[1::2, 1::2]
    )


def _bilinear_up(arr: np.ndarray, target_shape) -> np.ndarray:
    """Factor-2 bilinear upsampling with half-pixel alignment."""
    th, tw = target_shape[:2]
    sh, sw = arr.shape[:2]

    def axis_coords(t, s):
        coord = (np.arange(t) + 0.5) / 2.0 - 0.5
        lo = np.clip(np.floor(coord).astype(int), 0, s - 1)
        hi = np.clip(lo + 1, 0, s - 1)
        frac = np.clip(coord - lo, 0.0, 1.0)
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(th, sh)
    xlo, xhi, fx = axis_coords(tw, sw)
    fy = fy.reshape(-1, 1, *([1] * (arr.ndim - 2)))
    fx = fx.reshape(1, -1, *([1] * (arr.ndim - 2)))
    top = arr[ylo][:, xlo] * (1 - fx) + arr[ylo][:, xhi] * fx
    bot = arr[yhi][:, xlo] * (1 - fx) + arr[yhi][:, xhi] * fx
    return top * (1 - fy) + bot * fy


def _pull_push(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Hole-free estimate from premultiplied values and [0,1] weights."""
    vs, ws, shapes = [values * weights[..., None]], [weights], [values.shape]
    while min(ws[-1].shape[:2]) > 2:
        wsum = _block_sum(ws[-1])
        vsum = _block_sum(vs[-1])
        wc = np.minimum(wsum, 1.0)
        scale = np.divide(wc, wsum, out=np.zeros_like(wsum), where=wsum > 0)
        vs.append(vsum * scale[..., None])
        ws.append(wc)
        shapes.append(vsum.shape)

    w = ws[-1]
    v = vs[-1]
    fill = np.divide(v, w[..., None], out=np.zeros_like(v), where=w[..., None] > 0)
    if (w == 0).any():
        total_w = max(float(w.sum()), 1e-12)
        mean = v.sum(axis=(0, 1)) / total_w
        fill = np.where(w[..., None] > 0, fill, mean)
    for lvl in range(len(ws) - 2, -1, -1):
        up = _bilinear_up(fill, shapes[lvl])
        fill = vs[lvl] + (1.0 - ws[lvl][..., None]) * up
    return fill


def _relax(filled: np.ndarray, values: np.ndarray, sample_mask: np.ndarray, iters: int) -> np.ndarray:
    """Jacobi sweeps toward the harmonic fill, samples held fixed."""
    free = ~sample_mask
    out = filled
    for _ in range(iters):
        padded = np.pad(out, [(1, 1), (1, 1), (0, 0)], mode="edge")
        avg = (
            padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
        ) / 4.0
        out = np.where(free[..., None], avg, values)
    return out


def densify(sparse: SparseImage, mask: SamplingMask | None = None, relax_iters: int = 40) -> ImagePatch:
    """Interpolate scattered samples into a dense unit-range image.

    Output equals the sample values exactly at sample positions and never
    leaves the samples' min/max envelope (interpolation, not extrapolation).
    """
    mask = mask if mask is not None else sparse.mask
    bits = mask.bits
    if bits.shape != sparse.values.shape[:2]:
        raise ValidationError("mask and sparse values dimensions differ")
    if mask.n_samples < 3:
        raise ValidationError("densify needs at least 3 samples")
    weights = bits.astype(np.float64)
    filled = _pull_push(sparse.values, weights)
    filled = np.where(bits[..., None], sparse.values, filled)
    if relax_iters > 0 and not bits.all():
        filled = _relax(filled, sparse.values, bits, relax_iters)
    return ImagePatch(np.clip(filled, 0.0, 1.0), "unit")


def radial_power_profile(bits: np.ndarray, n_bins: int = 32):
    """Radially averaged power spectrum of a zero-mean binary mask.

    Returns (bin_centers in cycles/pixel, mean power per annulus). The DC
    bin is excluded.
    """
    arr = bits.astype(np.float64)
    arr -= arr.mean()
    spectrum = np.abs(np.fft.fft2(arr)) ** 2 / arr.size
    fy = np.fft.fftfreq(arr.shape[0])
    fx = np.fft.fftfreq(arr.shape[1])
    radius = np.hypot(fy[:, None], fx[None, :])
    edges = np.linspace(0.0, 0.5, n_bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2
    power = np.zeros(n_bins)
    for i in range(n_bins):
        sel = (radius > edges[i]) & (radius <= edges[i + 1])
        power[i] = spectrum[sel].mean() if sel.any() else 0.0
    return centers, power


def lowest_octave_energy(bits: np.ndarray) -> float:
    """Mean spectral power in the lowest octave of radial frequency,
    i.e. radii in (0, 1/16] cycles/pixel (Nyquist = 1/2, three octaves down)."""
    arr = bits.astype(np.float64)
    arr -= arr.mean()
    spectrum = np.abs(np.fft.fft2(arr)) ** 2 / arr.size
    fy = np.fft.fftfreq(arr.shape[0])
    fx = np.fft.fftfreq(arr.shape[1])
    radius = np.hypot(fy[:, None], fx[None, :])
    sel = (radius > 0) & (radius <= 0.5 / 8)
    return float(spectrum[sel].mean())
