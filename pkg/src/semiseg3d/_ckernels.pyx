# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: patch accumulation, boundary extraction, exact EDT."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def stitch_accumulate(double[:, :, :, ::1] prob_sum,
                      cnp.int64_t[:, :, ::1] count,
                      double[:, :, :, :, ::1] patches,
                      cnp.int64_t[:, ::1] origins):
    """Add every patch into ``prob_sum`` at its origin and bump ``count``."""
    cdef Py_ssize_t n = patches.shape[0]
    cdef Py_ssize_t sx = patches.shape[1], sy = patches.shape[2], sz = patches.shape[3]
    cdef Py_ssize_t k = patches.shape[4]
    cdef Py_ssize_t p, i, j, l, c, ox, oy, oz
    if origins.shape[0] != n:
        raise ValueError("one origin per patch required")
    if prob_sum.shape[3] != k:
        raise ValueError("channel count mismatch")
    with nogil:
        for p in range(n):
            ox = origins[p, 0]
            oy = origins[p, 1]
            oz = origins[p, 2]
            for i in range(sx):
                for j in range(sy):
                    for l in range(sz):
                        count[ox + i, oy + j, oz + l] += 1
                        for c in range(k):
                            prob_sum[ox + i, oy + j, oz + l, c] += patches[p, i, j, l, c]


def boundary_mask(cnp.uint8_t[:, :, ::1] mask):
    """Foreground voxels with a 6-neighbour that is background or outside."""
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1], d = mask.shape[2]
    out_arr = np.zeros((h, w, d), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, l
    with nogil:
        for i in range(h):
            for j in range(w):
                for l in range(d):
                    if not mask[i, j, l]:
                        continue
                    if (i == 0 or i == h - 1 or j == 0 or j == w - 1 or l == 0 or l == d - 1
                            or not mask[i - 1, j, l] or not mask[i + 1, j, l]
                            or not mask[i, j - 1, l] or not mask[i, j + 1, l]
                            or not mask[i, j, l - 1] or not mask[i, j, l + 1]):
                        out[i, j, l] = 1
    return out_arr


cdef void _envelope_1d(double* f, Py_ssize_t n, double step,
                       double* out, Py_ssize_t* v, double* z) noexcept nogil:
    # Lower envelope of parabolas (Felzenszwalb & Huttenlocher); sites at q * step.
    cdef Py_ssize_t q, k = -1, j
    cdef double s, xq, xv
    for q in range(n):
        if f[q] == INFINITY:
            continue
        xq = q * step
        while k >= 0:
            xv = v[k] * step
            s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        if k == 0:
            z[0] = -INFINITY
        else:
            z[k] = s
        z[k + 1] = INFINITY
    if k < 0:
        for q in range(n):
            out[q] = INFINITY
        return
    j = 0
    for q in range(n):
        xq = q * step
        while z[j + 1] < xq:
            j += 1
        xv = v[j] * step
        out[q] = (xq - xv) * (xq - xv) + f[v[j]]


def edt_squared(cnp.uint8_t[:, :, ::1] features, spacing):
    """Squared Euclidean distance (mm^2) from each voxel to the nearest feature voxel.

    Voxels are at ``index * spacing``; with no feature voxels every entry is inf.
    """
    cdef Py_ssize_t h = features.shape[0], w = features.shape[1], d = features.shape[2]
    cdef double s0 = spacing[0], s1 = spacing[1], s2 = spacing[2]
    dist_arr = np.where(np.asarray(features) != 0, 0.0, np.inf)
    cdef double[:, :, ::1] dist = dist_arr
    cdef Py_ssize_t n = max(h, w, d)
    cdef double[::1] fbuf = np.empty(n, dtype=np.float64)
    cdef double[::1] obuf = np.empty(n, dtype=np.float64)
    cdef double[::1] zbuf = np.empty(n + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] vbuf = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t i, j, l
    with nogil:
        for j in range(w):
            for l in range(d):
                for i in range(h):
                    fbuf[i] = dist[i, j, l]
                _envelope_1d(&fbuf[0], h, s0, &obuf[0], &vbuf[0], &zbuf[0])
                for i in range(h):
                    dist[i, j, l] = obuf[i]
        for i in range(h):
            for l in range(d):
                for j in range(w):
                    fbuf[j] = dist[i, j, l]
                _envelope_1d(&fbuf[0], w, s1, &obuf[0], &vbuf[0], &zbuf[0])
                for j in range(w):
                    dist[i, j, l] = obuf[j]
        for i in range(h):
            for j in range(w):
                _envelope_1d(&dist[i, j, 0], d, s2, &obuf[0], &vbuf[0], &zbuf[0])
                for l in range(d):
                    dist[i, j, l] = obuf[l]
    return dist_arr
