"""Backend selection for the void-and-cluster ranking kernel.

The ranking loop is the one serial CPU hot spot in the toolkit (every other
heavy path runs inside torch). A Cython extension is built best-effort at
install time; when it is missing, or ``FOVRECON_NO_NATIVE=1`` is set, the
NumPy fallback is used. Both backends implement the identical update and
tie-breaking rules, so masks are bit-for-bit reproducible across them.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import fallback

if os.environ.get("FOVRECON_NO_NATIVE") == "1":
    native = None
else:
    try:
        from . import native
    except ImportError:
        native = None

BACKEND = "native" if native is not None else "numpy"


def energy_window(sigma: float, h: int, w: int):
    """Truncated Gaussian energy kernel used for cluster/void scoring.

    The support radius is ceil(4.5 * sigma), clamped so the window never
    wraps onto itself on the torus.
    """
    radius = int(math.ceil(4.5 * sigma))
    radius = min(radius, (min(h, w) - 1) // 2)
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    d2 = ax[:, None] ** 2 + ax[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma**2)), radius


def rank_matrix(h: int, w: int, sigma: float = 1.5, seed: int = 0,
                initial_fraction: float = 0.1, force_backend: str | None = None) -> np.ndarray:
    """Void-and-cluster rank (dither) matrix of shape (h, w).

    Ranks are a permutation of 0 .. h*w-1; thresholding ``rank < k`` yields a
    blue-noise mask with exactly k samples. Deterministic for fixed
    (h, w, sigma, seed) regardless of backend.
    """
    if h < 4 or w < 4:
        raise ValueError("rank matrix needs at least a 4x4 grid")
    n = h * w
    n1 = max(1, int(round(initial_fraction * n)))
    rng = np.random.default_rng(seed)
    bits = np.zeros(n, dtype=np.uint8)
    bits[rng.choice(n, size=n1, replace=False)] = 1
    bits = bits.reshape(h, w)
    win, radius = energy_window(sigma, h, w)

    backend = force_backend or BACKEND
    if backend == "native" and native is not None:
        rank = native.vac_rank(bits, win, radius)
    else:
        rank = fallback.vac_rank(bits, win, radius)
    return np.asarray(rank, dtype=np.int32)
