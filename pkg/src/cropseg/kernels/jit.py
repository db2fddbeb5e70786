"""Numba implementations of the loop-bound kernels.

Every prange iteration owns a disjoint output slice, so results are
bit-deterministic across runs regardless of thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def _depthwise_forward(x, w, bias, stride, pad, dil):
    b, c, h, w_in = x.shape
    kh, kw = w.shape[1], w.shape[2]
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (w_in + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    for p in prange(b * c):
        bi = p // c
        ci = p % c
        for i in range(oh):
            ih0 = i * stride - pad
            for j in range(ow):
                iw0 = j * stride - pad
                acc = bias[ci]
                for k in range(kh):
                    ih = ih0 + k * dil
                    if ih < 0 or ih >= h:
                        continue
                    for l in range(kw):
                        iw = iw0 + l * dil
                        if iw < 0 or iw >= w_in:
                            continue
                        acc += x[bi, ci, ih, iw] * w[ci, k, l]
                out[bi, ci, i, j] = acc
    return out


@njit(parallel=True, fastmath=True, cache=True)
def _depthwise_backward_input(gy, w, h, w_in, stride, pad, dil):
    b, c, oh, ow = gy.shape
    kh, kw = w.shape[1], w.shape[2]
    gx = np.zeros((b, c, h, w_in), dtype=gy.dtype)
    for p in prange(b * c):
        bi = p // c
        ci = p % c
        for i in range(oh):
            ih0 = i * stride - pad
            for j in range(ow):
                iw0 = j * stride - pad
                g = gy[bi, ci, i, j]
                for k in range(kh):
                    ih = ih0 + k * dil
                    if ih < 0 or ih >= h:
                        continue
                    for l in range(kw):
                        iw = iw0 + l * dil
                        if iw < 0 or iw >= w_in:
                            continue
                        gx[bi, ci, ih, iw] += g * w[ci, k, l]
    return gx


@njit(parallel=True, fastmath=True, cache=True)
def _depthwise_backward_weights(x, gy, kh, kw, stride, pad, dil):
    b, c, h, w_in = x.shape
    oh, ow = gy.shape[2], gy.shape[3]
    gw = np.zeros((c, kh, kw), dtype=x.dtype)
    gb = np.zeros(c, dtype=x.dtype)
    for ci in prange(c):
        for bi in range(b):
            for i in range(oh):
                ih0 = i * stride - pad
                for j in range(ow):
                    g = gy[bi, ci, i, j]
                    gb[ci] += g
                    iw0 = j * stride - pad
                    for k in range(kh):
                        ih = ih0 + k * dil
                        if ih < 0 or ih >= h:
                            continue
                        for l in range(kw):
                            iw = iw0 + l * dil
                            if iw < 0 or iw >= w_in:
                                continue
                            gw[ci, k, l] += g * x[bi, ci, ih, iw]
    return gw, gb


@njit(parallel=True, fastmath=True, cache=True)
def _col2im_add(gcols, h, w_in, stride, pad, dil):
    b, c, kh, kw, oh, ow = gcols.shape
    gx = np.zeros((b, c, h, w_in), dtype=gcols.dtype)
    for p in prange(b * c):
        bi = p // c
        ci = p % c
        for k in range(kh):
            for l in range(kw):
                for i in range(oh):
                    ih = i * stride - pad + k * dil
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(ow):
                        iw = j * stride - pad + l * dil
                        if iw < 0 or iw >= w_in:
                            continue
                        gx[bi, ci, ih, iw] += gcols[bi, ci, k, l, i, j]
    return gx


def _c(a):
    return np.ascontiguousarray(a)


def depthwise_forward(x, w, bias, stride, pad, dil=1):
    return _depthwise_forward(_c(x), _c(w), _c(bias), stride, pad, dil)


def depthwise_backward_input(gy, w, h, w_in, stride, pad, dil=1):
    return _depthwise_backward_input(_c(gy), _c(w), h, w_in, stride, pad, dil)


def depthwise_backward_weights(x, gy, kh, kw, stride, pad, dil=1):
    return _depthwise_backward_weights(_c(x), _c(gy), kh, kw, stride, pad, dil)


def col2im_add(gcols, h, w_in, stride, pad, dil=1):
    return _col2im_add(_c(gcols), h, w_in, stride, pad, dil)
