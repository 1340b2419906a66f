# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: im2col patch extraction, depthwise conv, max pooling.

Same contracts as ``yoloface.ops._numpy_kernels``; picked at import time by
``yoloface.ops._backend``. Parallel loops write disjoint output slots, so a
fixed thread count gives bit-identical results run to run.
"""
from cython.parallel import prange
cimport openmp

import numpy as np

name = "cython"


cdef inline int _resolve_threads(int num_threads) noexcept nogil:
    if num_threads > 0:
        return num_threads
    return openmp.omp_get_max_threads()


def im2col(const float[:, :, :, ::1] xp, int k, int stride, int num_threads=0):
    """Extract k x k patches from a padded NCHW array.

    Returns ``[N, C*k*k, Ho*Wo]`` with rows ordered channel-major
    (``c*k*k + i*k + j``).
    """
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    out_arr = np.empty((n, c * k * k, ho * wo), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef int nt = _resolve_threads(num_threads)
    cdef Py_ssize_t nc, nn, cc, i, j, row, y, x
    with nogil:
        for nc in prange(n * c, num_threads=nt, schedule="static"):
            nn = nc // c
            cc = nc % c
            for i in range(k):
                for j in range(k):
                    row = (cc * k + i) * k + j
                    for y in range(ho):
                        for x in range(wo):
                            out[nn, row, y * wo + x] = xp[nn, cc, y * stride + i, x * stride + j]
    return out_arr


def depthwise_conv(const float[:, :, :, ::1] xp, const float[:, :, ::1] w, int stride, int num_threads=0):
    """Depthwise convolution on a padded input; ``w`` is ``[C, k, k]``."""
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t k = w.shape[1]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    out_arr = np.empty((n, c, ho, wo), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef int nt = _resolve_threads(num_threads)
    cdef Py_ssize_t nc, nn, cc, y, x, i, j
    cdef float acc
    with nogil:
        for nc in prange(n * c, num_threads=nt, schedule="static"):
            nn = nc // c
            cc = nc % c
            for y in range(ho):
                for x in range(wo):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            acc = acc + xp[nn, cc, y * stride + i, x * stride + j] * w[cc, i, j]
                    out[nn, cc, y, x] = acc
    return out_arr


def maxpool(const float[:, :, :, ::1] xin, int k, int stride, int pad, int num_threads=0):
    """Window maximum with ignore-pad semantics (padding acts as -inf)."""
    cdef Py_ssize_t n = xin.shape[0], c = xin.shape[1]
    cdef Py_ssize_t h = xin.shape[2], w = xin.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.empty((n, c, ho, wo), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef int nt = _resolve_threads(num_threads)
    cdef float neg_inf = -float("inf")
    cdef Py_ssize_t nc, nn, cc, y, x, i, j, yy, xx
    cdef float best, v
    with nogil:
        for nc in prange(n * c, num_threads=nt, schedule="static"):
            nn = nc // c
            cc = nc % c
            for y in range(ho):
                for x in range(wo):
                    best = neg_inf
                    for i in range(k):
                        yy = y * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        for j in range(k):
                            xx = x * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            v = xin[nn, cc, yy, xx]
                            if v > best:
                                best = v
                    out[nn, cc, y, x] = best
    return out_arr
