"""Pure numpy versions of the compiled kernels (same results, slower)."""

from __future__ import annotations

import numpy as np

from .fixed import double_mac_array


def double_mac_sweep(lo=-128, hi=127):
    vals = np.arange(lo, hi + 1, dtype=np.int64)
    w0 = vals[:, None]
    w1 = vals[None, :]
    bad = 0
    for i in vals:
        m0, m1 = double_mac_array(i, w0, w1, check=False)
        bad += int(np.count_nonzero((m0 != i * w0) | (m1 != i * w1)))
    return len(vals) ** 3, bad


def _patches(x, k, stride, pad_t, pad_l, out_h, out_w):
    """(C, K, K, out_h, out_w) view of the zero-padded input."""
    c, h, w = x.shape
    pad_b = max(0, (out_h - 1) * stride + k - h - pad_t)
    pad_r = max(0, (out_w - 1) * stride + k - w - pad_l)
    xp = np.pad(x, ((0, 0), (pad_t, pad_b), (pad_l, pad_r)))
    out = np.empty((c, k, k, out_h, out_w), dtype=np.int64)
    for ky in range(k):
        for kx in range(k):
            out[:, ky, kx] = xp[:, ky:ky + stride * (out_h - 1) + 1:stride,
                                kx:kx + stride * (out_w - 1) + 1:stride]
    return out


def conv_accumulate(x, w, stride, pad_t, pad_l, out_h, out_w):
    oc_n, c_n, k, _ = w.shape
    cols = _patches(np.asarray(x, np.int64), k, stride, pad_t, pad_l,
                    out_h, out_w).reshape(c_n * k * k, out_h * out_w)
    wf = np.asarray(w, np.int64).reshape(oc_n, -1)
    acc = np.zeros((oc_n, out_h * out_w), dtype=np.int64)
    for oc in range(0, oc_n, 2):
        w1 = wf[oc + 1] if oc + 1 < oc_n else np.zeros_like(wf[oc])
        m0, m1 = double_mac_array(cols, wf[oc][:, None], w1[:, None], check=False)
        acc[oc] = m0.sum(axis=0)
        if oc + 1 < oc_n:
            acc[oc + 1] = m1.sum(axis=0)
    return acc.reshape(oc_n, out_h, out_w)


def dw_accumulate(x, w, stride, pad_t, pad_l, out_h, out_w):
    c_n, k, _ = w.shape
    cols = _patches(np.asarray(x, np.int64), k, stride, pad_t, pad_l, out_h, out_w)
    return np.einsum("ckyx,ck->cyx", cols.reshape(c_n, k * k, out_h, out_w),
                     np.asarray(w, np.int64).reshape(c_n, k * k))
