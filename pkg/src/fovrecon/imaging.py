"""Image containers, Gaussian blur, Laplacian pyramids, display geometry,
and the three-region foveated compositor.

Everything here is a pure function on immutable inputs. The canonical
pixel representation is float64 RGB in [0, 1] (``unit`` range); the signed
[-1, 1] range exists only at the generator's tanh boundary and must be
converted explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .errors import ValidationError

# Tolerated numeric slack when validating declared ranges; values inside the
# slack are clipped, values beyond it are rejected.
_RANGE_SLACK = 1e-4

_RANGES = {"unit": (0.0, 1.0), "signed": (-1.0, 1.0)}

# 5-tap binomial kernel (Burt-Adelson) used for pyramid down/upsampling.
_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class ImagePatch:
    """An H x W x 3 float image with an explicit value-range contract.

    ``range_tag`` is ``"unit"`` for [0, 1] data or ``"signed"`` for [-1, 1]
    data. Values are validated on construction (with a small float slack,
    then clipped exactly to the declared range). H and W must be >= 16.
    """

    data: np.ndarray
    range_tag: str = "unit"

    def __post_init__(self):
        if self.range_tag not in _RANGES:
            raise ValidationError(f"unknown range_tag {self.range_tag!r}")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"expected H x W x 3 image, got shape {arr.shape}")
        if arr.shape[0] < 16 or arr.shape[1] < 16:
            raise ValidationError(f"image too small: {arr.shape[0]}x{arr.shape[1]} (need >= 16)")
        lo, hi = _RANGES[self.range_tag]
        if not np.isfinite(arr).all():
            raise ValidationError("image contains non-finite values")
        if arr.min() < lo - _RANGE_SLACK or arr.max() > hi + _RANGE_SLACK:
            raise ValidationError(
                f"values [{arr.min():.6g}, {arr.max():.6g}] outside declared "
                f"{self.range_tag} range [{lo}, {hi}]"
            )
        arr = np.clip(arr, lo, hi)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_unit(self) -> "ImagePatch":
        if self.range_tag == "unit":
            return self
        return ImagePatch((self.data + 1.0) / 2.0, "unit")

    def to_signed(self) -> "ImagePatch":
        if self.range_tag == "signed":
            return self
        return ImagePatch(self.data * 2.0 - 1.0, "signed")


def load_png(path) -> ImagePatch:
    """Read an 8-bit sRGB PNG as a unit-range patch (linear 1/255 mapping)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImagePatch(arr, "unit")


def save_png(img: ImagePatch, path) -> None:
    """Write a unit-range patch as 8-bit sRGB PNG (values scaled by 255)."""
    arr = img.to_unit().data
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


@dataclass(frozen=True)
class FieldGeometry:
    """Display geometry linking pixels to visual degrees.

    Pixels are assumed square, so the physical width together with the
    horizontal resolution fixes the meters-per-pixel pitch.
    """

    resolution_px: tuple  # (width, height)
    physical_width_m: float
    viewing_distance_m: float

    def __post_init__(self):
        w, h = self.resolution_px
        if w <= 0 or h <= 0 or self.physical_width_m <= 0 or self.viewing_distance_m <= 0:
            raise ValidationError("geometry dimensions must be positive")

    @property
    def meters_per_pixel(self) -> float:
        return self.physical_width_m / self.resolution_px[0]

    @property
    def degrees_per_pixel(self) -> float:
        """Small-angle pitch at the gaze point, in degrees per pixel."""
        return math.degrees(math.atan(self.meters_per_pixel / self.viewing_distance_m))


@dataclass(frozen=True)
class RegionPartition:
    """Three-region split (fovea / near periphery / far periphery) around a
    gaze point, with linear cross-fades of ``blend_band_deg`` width centered
    on each boundary."""

    gaze_px: tuple  # (x, y)
    near_boundary_deg: float = 8.0
    far_boundary_deg: float = 14.0
    blend_band_deg: float = 1.0

    def __post_init__(self):
        if not 0 < self.near_boundary_deg < self.far_boundary_deg:
            raise ValidationError("need 0 < near_boundary_deg < far_boundary_deg")
        if self.blend_band_deg < 0:
            raise ValidationError("blend_band_deg must be >= 0")


def pixel_eccentricity(geom: FieldGeometry, gaze_px, pixel) -> float:
    """Angular distance in visual degrees between ``pixel`` and ``gaze_px``.

    Uses the exact arctangent of physical offset over viewing distance, so
    wide fields remain correct; zero exactly at the gaze point.
    """
    dx = (pixel[0] - gaze_px[0]) * geom.meters_per_pixel
    dy = (pixel[1] - gaze_px[1]) * geom.meters_per_pixel
    return math.degrees(math.atan(math.hypot(dx, dy) / geom.viewing_distance_m))


def eccentricity_map(geom: FieldGeometry, gaze_px, shape) -> np.ndarray:
    """Per-pixel eccentricity (degrees) for an H x W grid, vectorized."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = (xs - gaze_px[0]) * geom.meters_per_pixel
    dy = (ys - gaze_px[1]) * geom.meters_per_pixel
    return np.degrees(np.arctan(np.hypot(dx, dy) / geom.viewing_distance_m))


def gaussian_blur(img: ImagePatch, sigma: float) -> ImagePatch:
    """Separable Gaussian low-pass with a sampled kernel of radius ceil(3*sigma).

    The kernel is normalized to sum 1 and applied with reflect padding;
    sigma = 0 returns the input unchanged.
    """
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    if sigma == 0:
        return img
    arr = _blur_array(img.data, sigma)
    return ImagePatch(arr, img.range_tag)


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian, radius ceil(3*sigma), normalized to sum 1."""
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return arr
    k = gaussian_kernel_1d(sigma)
    out = correlate1d(arr, k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="reflect")
    return out


@dataclass(frozen=True)
class LaplacianPyramid:
    """Band-pass decomposition; ``levels[0]`` is the finest band and
    ``residual`` the coarsest Gaussian level. Level l (the residual being
    the last level) has spatial size ceil(H / 2**l) x ceil(W / 2**l)."""

    levels: tuple = field(default_factory=tuple)
    residual: np.ndarray = None

    @property
    def n_levels(self) -> int:
        """Total level count: band images plus the residual."""
        return len(self.levels) + 1


def _pyr_blur(arr: np.ndarray, kernel=_PYR_KERNEL) -> np.ndarray:
    out = correlate1d(arr, kernel, axis=0, mode="reflect")
    out = correlate1d(out, kernel, axis=1, mode="reflect")
    return out


def pyr_down(arr: np.ndarray) -> np.ndarray:
    """Binomial blur then 2x decimation (keeps even-index samples)."""
    return _pyr_blur(arr)[::2, ::2]


def _up_axis(arr: np.ndarray, target: int) -> np.ndarray:
    """Doubled-kernel upsampling along axis 0 via even/odd phases, with
    symmetric padding applied in the coarse domain (DC-preserving at the
    borders, unlike blurring a reflect-padded zero-stuffed lattice)."""
    xp = np.concatenate([arr[:1], arr, arr[-1:]], axis=0)
    n = arr.shape[0]
    even = 0.125 * xp[:n] + 0.75 * xp[1 : n + 1] + 0.125 * xp[2 : n + 2]
    n_odd = target - n
    odd = 0.5 * (xp[1 : n_odd + 1] + xp[2 : n_odd + 2])
    out = np.empty((target,) + arr.shape[1:], dtype=arr.dtype)
    out[0::2] = even[: target - n_odd]
    out[1::2] = odd
    return out


def pyr_up(arr: np.ndarray, target_shape) -> np.ndarray:
    """Upsample a coarse Gaussian level to ``target_shape``."""
    th, tw = target_shape[:2]
    out = _up_axis(arr, th)
    out = np.swapaxes(_up_axis(np.swapaxes(out, 0, 1), tw), 0, 1)
    return out


def build_laplacian_pyramid(img: ImagePatch, n_levels: int) -> LaplacianPyramid:
    """Decompose into ``n_levels`` total levels: n_levels - 1 band images
    plus the Gaussian residual.

    Band l is (Gaussian level l) - upsample(Gaussian level l+1). Collapsing
    with :func:`collapse_pyramid` reproduces the input to float precision.
    """
    if n_levels < 1:
        raise ValidationError("n_levels must be >= 1")
    h, w = img.height, img.width
    if min(h, w) / 2 ** (n_levels - 1) < 2:
        raise ValidationError(
            f"{n_levels} levels is too deep for a {h}x{w} image "
            f"(min dimension must stay >= 2 at the residual)"
        )
    gauss = [img.data]
    for _ in range(n_levels - 1):
        gauss.append(pyr_down(gauss[-1]))
    bands = []
    for l in range(n_levels - 1):
        bands.append(gauss[l] - pyr_up(gauss[l + 1], gauss[l].shape))
    return LaplacianPyramid(levels=tuple(bands), residual=gauss[n_levels - 1])


def collapse_pyramid(pyr: LaplacianPyramid) -> ImagePatch:
    """Invert :func:`build_laplacian_pyramid`; output clipped to unit range."""
    _check_pyramid_shapes(pyr)
    acc = pyr.residual
    for band in reversed(pyr.levels):
        acc = band + pyr_up(acc, band.shape)
    return ImagePatch(np.clip(acc, 0.0, 1.0), "unit")


def collapse_pyramid_array(pyr: LaplacianPyramid) -> np.ndarray:
    """Collapse without range clipping (raw reconstruction array)."""
    _check_pyramid_shapes(pyr)
    acc = pyr.residual
    for band in reversed(pyr.levels):
        acc = band + pyr_up(acc, band.shape)
    return acc


def _check_pyramid_shapes(pyr: LaplacianPyramid) -> None:
    if pyr.residual is None:
        raise ValidationError("pyramid is missing its residual")
    if not pyr.levels:
        return
    h, w = pyr.levels[0].shape[:2]
    for l, band in enumerate(pyr.levels):
        expect = (math.ceil(h / 2**l), math.ceil(w / 2**l))
        if band.shape[:2] != expect:
            raise ValidationError(
                f"level {l} has shape {band.shape[:2]}, expected {expect}"
            )
    l = len(pyr.levels)
    expect = (math.ceil(h / 2**l), math.ceil(w / 2**l))
    if pyr.residual.shape[:2] != expect:
        raise ValidationError(f"residual shape {pyr.residual.shape[:2]} != {expect}")


def partition_weights(geom: FieldGeometry, part: RegionPartition, shape):
    """Per-pixel convex weights (fovea, near, far) for an H x W image.

    The fovea weight is 1 out to near_boundary - blend_band/2, then ramps
    linearly to 0 across the band centered on the boundary; the far weight
    ramps up symmetrically around the far boundary; the near weight takes
    up the remainder so the three maps sum to 1 everywhere.
    """
    bb = part.blend_band_deg
    if part.near_boundary_deg + bb / 2 >= part.far_boundary_deg - bb / 2:
        raise ValidationError("blend band wider than the near-periphery region")
    if part.near_boundary_deg - bb / 2 < 0:
        raise ValidationError("blend band extends below zero eccentricity")
    ecc = eccentricity_map(geom, part.gaze_px, shape)
    if bb == 0:
        fovea = (ecc < part.near_boundary_deg).astype(np.float64)
        far = (ecc >= part.far_boundary_deg).astype(np.float64)
    else:
        fovea = np.clip((part.near_boundary_deg + bb / 2 - ecc) / bb, 0.0, 1.0)
        far = np.clip((ecc - (part.far_boundary_deg - bb / 2)) / bb, 0.0, 1.0)
    near = 1.0 - fovea - far
    return fovea, near, far


def composite_foveated(full: ImagePatch, near: ImagePatch, far: ImagePatch, weights) -> ImagePatch:
    """Blend the three reconstructions with per-pixel convex weights.

    ``weights`` is the (fovea, near, far) triple from
    :func:`partition_weights`; all images must share dimensions.
    """
    w_f, w_n, w_r = weights
    shape = full.data.shape
    if near.data.shape != shape or far.data.shape != shape:
        raise ValidationError("composite inputs must share dimensions")
    if w_f.shape != shape[:2]:
        raise ValidationError("weight maps must match image dimensions")
    out = (
        w_f[..., None] * full.data
        + w_n[..., None] * near.data
        + w_r[..., None] * far.data
    )
    return ImagePatch(out, "unit")
