"""NumPy implementation of the void-and-cluster ranking loop.

Mirrors ``native.pyx`` operation for operation: energy updates add the same
truncated kernel window to the same cells, and min/max searches break ties
on the first flat (row-major) index, so both backends produce identical
rank matrices.
"""

from __future__ import annotations

import numpy as np


def _window_indices(pos: int, h: int, w: int, radius: int):
    y, x = divmod(pos, w)
    rows = (np.arange(-radius, radius + 1) + y) % h
    cols = (np.arange(-radius, radius + 1) + x) % w
    return np.ix_(rows, cols)


def _tightest_cluster(energy: np.ndarray, bits: np.ndarray) -> int:
    masked = np.where(bits.ravel() != 0, energy.ravel(), -np.inf)
    return int(np.argmax(masked))


def _largest_void(energy: np.ndarray, bits: np.ndarray) -> int:
    masked = np.where(bits.ravel() == 0, energy.ravel(), np.inf)
    return int(np.argmin(masked))


def vac_rank(bits: np.ndarray, win: np.ndarray, radius: int) -> np.ndarray:
    """Rank every grid cell from the initial binary pattern ``bits``.

    Phase 0 relaxes the pattern by swapping tightest clusters into largest
    voids until stable; phase 1 ranks the initial ones by repeated removal;
    phase 2 ranks the remaining cells by repeated insertion at the largest
    void. On the torus the insertion rule also covers the majority regime,
    because the zeros' own energy field is a constant minus the ones' field.
    """
    bits = bits.astype(np.uint8).copy()
    h, w = bits.shape
    n = h * w
    energy = np.zeros((h, w), dtype=np.float64)
    for pos in np.flatnonzero(bits.ravel()):
        energy[_window_indices(int(pos), h, w, radius)] += win
    n1 = int(bits.sum())

    flat_bits = bits.ravel()
    for _ in range(10 * n1 + 10):
        cluster = _tightest_cluster(energy, bits)
        flat_bits[cluster] = 0
        energy[_window_indices(cluster, h, w, radius)] -= win
        void = _largest_void(energy, bits)
        flat_bits[void] = 1
        energy[_window_indices(void, h, w, radius)] += win
        if void == cluster:
            break

    rank = np.empty(n, dtype=np.int32)

    # Phase 1: peel the relaxed pattern, assigning ranks n1-1 .. 0.
    bits1 = bits.copy()
    flat1 = bits1.ravel()
    energy1 = energy.copy()
    for r in range(n1 - 1, -1, -1):
        cluster = _tightest_cluster(energy1, bits1)
        flat1[cluster] = 0
        energy1[_window_indices(cluster, h, w, radius)] -= win
        rank[cluster] = r

    # Phase 2: grow the relaxed pattern, assigning ranks n1 .. n-1.
    for r in range(n1, n):
        void = _largest_void(energy, bits)
        flat_bits[void] = 1
        energy[_window_indices(void, h, w, radius)] += win
        rank[void] = r

    return rank.reshape(h, w)
