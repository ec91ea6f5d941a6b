# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops of the functional reference.

Bit-exact twins of the numpy code in ``_fallback.py``; the package picks
this module at import when it was built.
"""

import numpy as np

cdef long long PACK = 1 << 18
cdef unsigned long long LOW_MASK = (1 << 18) - 1
cdef long long LOW_SIGN = 1 << 17
cdef unsigned long long P_MASK = (1ULL << 48) - 1
cdef long long P_SIGN = 1LL << 47


cdef inline void _dmac(long long i, long long w0, long long w1,
                       long long* m0, long long* m1) noexcept nogil:
    cdef long long a = w0 + w1 * PACK
    cdef unsigned long long u = (<unsigned long long>(a * i)) & P_MASK
    cdef long long p = <long long>u
    if p & P_SIGN:
        p -= 1LL << 48
    cdef long long low = <long long>(u & LOW_MASK)
    if low & LOW_SIGN:
        low -= PACK
    m0[0] = low
    m1[0] = (p >> 18) + (1 if low < 0 else 0)


def double_mac_sweep(int lo=-128, int hi=127):
    """Compare the packed multiplication with plain products for every
    operand triple in ``[lo, hi]^3``.  Returns ``(checked, mismatches)``."""
    cdef long long i, w0, w1, m0 = 0, m1 = 0
    cdef long long bad = 0, n = 0
    with nogil:
        for i in range(lo, hi + 1):
            for w0 in range(lo, hi + 1):
                for w1 in range(lo, hi + 1):
                    _dmac(i, w0, w1, &m0, &m1)
                    n += 1
                    if m0 != i * w0 or m1 != i * w1:
                        bad += 1
    return n, bad


def conv_accumulate(const long long[:, :, ::1] x, const long long[:, :, :, ::1] w,
                    int stride, int pad_t, int pad_l, int out_h, int out_w):
    """Partial sums of a normal convolution, two output channels per
    shared multiplication.  ``x`` is (C, H, W), ``w`` is (OC, C, K, K)."""
    cdef Py_ssize_t oc_n = w.shape[0], c_n = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t h = x.shape[1], wd = x.shape[2]
    out = np.zeros((oc_n, out_h, out_w), dtype=np.int64)
    cdef long long[:, :, ::1] acc = out
    cdef Py_ssize_t oc, c, ky, kx, oy, ox, iy, ix
    cdef long long v, a0, a1, m0 = 0, m1 = 0, w1
    with nogil:
        for oc in range(0, oc_n, 2):
            for oy in range(out_h):
                for ox in range(out_w):
                    a0 = 0
                    a1 = 0
                    for c in range(c_n):
                        for ky in range(k):
                            iy = oy * stride + ky - pad_t
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox * stride + kx - pad_l
                                if ix < 0 or ix >= wd:
                                    continue
                                v = x[c, iy, ix]
                                w1 = w[oc + 1, c, ky, kx] if oc + 1 < oc_n else 0
                                _dmac(v, w[oc, c, ky, kx], w1, &m0, &m1)
                                a0 += m0
                                a1 += m1
                    acc[oc, oy, ox] = a0
                    if oc + 1 < oc_n:
                        acc[oc + 1, oy, ox] = a1
    return out


def dw_accumulate(const long long[:, :, ::1] x, const long long[:, :, ::1] w,
                  int stride, int pad_t, int pad_l, int out_h, int out_w):
    """Partial sums of a depthwise convolution (one product per MAC)."""
    cdef Py_ssize_t c_n = w.shape[0], k = w.shape[1]
    cdef Py_ssize_t h = x.shape[1], wd = x.shape[2]
    out = np.zeros((c_n, out_h, out_w), dtype=np.int64)
    cdef long long[:, :, ::1] acc = out
    cdef Py_ssize_t c, ky, kx, oy, ox, iy, ix
    cdef long long a
    with nogil:
        for c in range(c_n):
            for oy in range(out_h):
                for ox in range(out_w):
                    a = 0
                    for ky in range(k):
                        iy = oy * stride + ky - pad_t
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride + kx - pad_l
                            if ix < 0 or ix >= wd:
                                continue
                            a += x[c, iy, ix] * w[c, ky, kx]
                    acc[c, oy, ox] = a
    return out
