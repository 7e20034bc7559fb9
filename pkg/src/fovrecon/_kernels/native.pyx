# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython twin of ``fallback.vac_rank``.

Selection is accelerated with per-block extrema caches, but the result is
defined identically to the NumPy version: energy updates add the same
truncated window once per cell, and searches return the first flat
(row-major) index achieving the extremum, so both backends produce
identical rank matrices.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef Py_ssize_t BLOCK = 16


cdef struct Grid:
    double *energy
    unsigned char *bits
    double *blk_min0   # min energy among zeros per block (+inf if none)
    double *blk_max1   # max energy among ones per block (-inf if none)
    Py_ssize_t h, w, nby, nbx


cdef void _refresh_block(Grid *g, Py_ssize_t bi, Py_ssize_t bj) noexcept:
    cdef Py_ssize_t i0 = bi * BLOCK
    cdef Py_ssize_t j0 = bj * BLOCK
    cdef Py_ssize_t i1 = i0 + BLOCK
    cdef Py_ssize_t j1 = j0 + BLOCK
    if i1 > g.h:
        i1 = g.h
    if j1 > g.w:
        j1 = g.w
    cdef double m0 = 1e308
    cdef double m1 = -1e308
    cdef Py_ssize_t i, j, base
    cdef double e
    for i in range(i0, i1):
        base = i * g.w
        for j in range(j0, j1):
            e = g.energy[base + j]
            if g.bits[base + j] == 0:
                if e < m0:
                    m0 = e
            else:
                if e > m1:
                    m1 = e
    g.blk_min0[bi * g.nbx + bj] = m0
    g.blk_max1[bi * g.nbx + bj] = m1


cdef void _refresh_col_blocks(Grid *g, Py_ssize_t bi, Py_ssize_t x, Py_ssize_t radius) noexcept:
    cdef Py_ssize_t dx, xx, bj, last = -1
    for dx in range(-radius, radius + 1):
        xx = (x + dx) % g.w
        if xx < 0:
            xx += g.w
        bj = xx // BLOCK
        if bj != last:
            last = bj
            _refresh_block(g, bi, bj)


cdef void _update(Grid *g, double[:, ::1] win, Py_ssize_t pos, Py_ssize_t radius,
                  double sign) noexcept:
    cdef Py_ssize_t y = pos // g.w
    cdef Py_ssize_t x = pos % g.w
    cdef Py_ssize_t dy, dx, yy, xx, bi, last
    for dy in range(-radius, radius + 1):
        yy = (y + dy) % g.h
        if yy < 0:
            yy += g.h
        for dx in range(-radius, radius + 1):
            xx = (x + dx) % g.w
            if xx < 0:
                xx += g.w
            g.energy[yy * g.w + xx] += sign * win[dy + radius, dx + radius]
    last = -1
    for dy in range(-radius, radius + 1):
        yy = (y + dy) % g.h
        if yy < 0:
            yy += g.h
        bi = yy // BLOCK
        if bi != last:
            last = bi
            _refresh_col_blocks(g, bi, x, radius)


cdef Py_ssize_t _first_match(Grid *g, Py_ssize_t b, double val, unsigned char want) noexcept:
    """First flat index in block ``b`` whose bit equals ``want`` and whose
    energy equals ``val`` exactly; -1 if none."""
    cdef Py_ssize_t bi = b // g.nbx
    cdef Py_ssize_t bj = b % g.nbx
    cdef Py_ssize_t i1 = bi * BLOCK + BLOCK
    cdef Py_ssize_t j1 = bj * BLOCK + BLOCK
    if i1 > g.h:
        i1 = g.h
    if j1 > g.w:
        j1 = g.w
    cdef Py_ssize_t i, j, base
    for i in range(bi * BLOCK, i1):
        base = i * g.w
        for j in range(bj * BLOCK, j1):
            if g.bits[base + j] == want and g.energy[base + j] == val:
                return base + j
    return -1


cdef Py_ssize_t _tightest_cluster(Grid *g) noexcept:
    """First flat index among ones with maximal energy."""
    cdef double best_val = -1e308
    cdef Py_ssize_t b, pos
    cdef Py_ssize_t best = -1
    cdef Py_ssize_t nblocks = g.nby * g.nbx
    for b in range(nblocks):
        if g.blk_max1[b] > best_val:
            best_val = g.blk_max1[b]
    for b in range(nblocks):
        if g.blk_max1[b] == best_val:
            pos = _first_match(g, b, best_val, 1)
            if pos >= 0 and (best < 0 or pos < best):
                best = pos
    return best


cdef Py_ssize_t _largest_void(Grid *g) noexcept:
    """First flat index among zeros with minimal energy."""
    cdef double best_val = 1e308
    cdef Py_ssize_t b, pos
    cdef Py_ssize_t best = -1
    cdef Py_ssize_t nblocks = g.nby * g.nbx
    for b in range(nblocks):
        if g.blk_min0[b] < best_val:
            best_val = g.blk_min0[b]
    for b in range(nblocks):
        if g.blk_min0[b] == best_val:
            pos = _first_match(g, b, best_val, 0)
            if pos >= 0 and (best < 0 or pos < best):
                best = pos
    return best


cdef void _set_bit(Grid *g, Py_ssize_t pos, unsigned char value) noexcept:
    g.bits[pos] = value
    _refresh_block(g, (pos // g.w) // BLOCK, (pos % g.w) // BLOCK)


cdef void _rebuild_blocks(Grid *g) noexcept:
    cdef Py_ssize_t bi, bj
    for bi in range(g.nby):
        for bj in range(g.nbx):
            _refresh_block(g, bi, bj)


def vac_rank(bits_in, win_in, int radius):
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] bits_arr = np.ascontiguousarray(bits_in, dtype=np.uint8).copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=2] win_arr = np.ascontiguousarray(win_in, dtype=np.float64)
    cdef Py_ssize_t h = bits_arr.shape[0]
    cdef Py_ssize_t w = bits_arr.shape[1]
    cdef Py_ssize_t n = h * w
    cdef cnp.ndarray[cnp.float64_t, ndim=2] energy_arr = np.zeros((h, w), dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=2] rank_arr = np.empty((h, w), dtype=np.int32)
    cdef double[:, ::1] win = win_arr
    cdef int[:, ::1] rank = rank_arr

    cdef Py_ssize_t nby = (h + BLOCK - 1) // BLOCK
    cdef Py_ssize_t nbx = (w + BLOCK - 1) // BLOCK
    cdef cnp.ndarray[cnp.float64_t, ndim=1] blk_min0 = np.empty(nby * nbx, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] blk_max1 = np.empty(nby * nbx, dtype=np.float64)

    cdef Grid g
    g.energy = <double *> cnp.PyArray_DATA(energy_arr)
    g.bits = <unsigned char *> cnp.PyArray_DATA(bits_arr)
    g.blk_min0 = <double *> cnp.PyArray_DATA(blk_min0)
    g.blk_max1 = <double *> cnp.PyArray_DATA(blk_max1)
    g.h = h
    g.w = w
    g.nby = nby
    g.nbx = nbx

    cdef Py_ssize_t pos, cluster, void_pos, r, it
    cdef Py_ssize_t n1 = 0
    _rebuild_blocks(&g)
    for pos in range(n):
        if g.bits[pos] != 0:
            n1 += 1
            _update(&g, win, pos, radius, 1.0)

    for it in range(10 * n1 + 10):
        cluster = _tightest_cluster(&g)
        _set_bit(&g, cluster, 0)
        _update(&g, win, cluster, radius, -1.0)
        void_pos = _largest_void(&g)
        _set_bit(&g, void_pos, 1)
        _update(&g, win, void_pos, radius, 1.0)
        if void_pos == cluster:
            break

    # Keep the relaxed state for phase 2 before phase 1 peels it apart.
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] bits_relaxed = bits_arr.copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=2] energy_relaxed = energy_arr.copy()

    # Phase 1: remove tightest clusters, assigning ranks n1-1 .. 0.
    for r in range(n1 - 1, -1, -1):
        cluster = _tightest_cluster(&g)
        _set_bit(&g, cluster, 0)
        _update(&g, win, cluster, radius, -1.0)
        rank[cluster // w, cluster % w] = <int> r

    # Phase 2: grow the relaxed pattern, assigning ranks n1 .. n-1.
    g.bits = <unsigned char *> cnp.PyArray_DATA(bits_relaxed)
    g.energy = <double *> cnp.PyArray_DATA(energy_relaxed)
    _rebuild_blocks(&g)
    for r in range(n1, n):
        void_pos = _largest_void(&g)
        _set_bit(&g, void_pos, 1)
        _update(&g, win, void_pos, radius, 1.0)
        rank[void_pos // w, void_pos % w] = <int> r

    return rank_arr
