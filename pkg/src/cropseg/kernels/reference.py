"""Pure-numpy kernels: vectorized fallbacks for the numba hot loops.

Also hosts the im2col/output-size helpers shared by both backends (the
strided-view copy in numpy beats an explicit gather loop, so im2col is not
backend-switched).
"""

from __future__ import annotations

import numpy as np


def conv_out_size(size: int, kernel: int, stride: int, pad: int, dil: int = 1) -> int:
    return (size + 2 * pad - dil * (kernel - 1) - 1) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, dil: int = 1) -> np.ndarray:
    """Extract sliding patches of ``x`` (B,C,H,W) as (B,C,kh,kw,OH,OW), contiguous."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad, dil)
    ow = conv_out_size(w, kw, stride, pad, dil)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (b, c, kh, kw, oh, ow),
        (s[0], s[1], s[2] * dil, s[3] * dil, s[2] * stride, s[3] * stride),
    )
    return np.ascontiguousarray(view)


def col2im_add(gcols: np.ndarray, h: int, w: int, stride: int, pad: int, dil: int = 1) -> np.ndarray:
    """Scatter-add patch gradients (B,C,kh,kw,OH,OW) back onto a (B,C,h,w) grid."""
    b, c, kh, kw, oh, ow = gcols.shape
    gx = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i * dil : i * dil + stride * oh : stride,
               j * dil : j * dil + stride * ow : stride] += gcols[:, :, i, j]
    return gx[:, :, pad : pad + h, pad : pad + w] if pad else gx


def depthwise_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray,
                      stride: int, pad: int, dil: int = 1) -> np.ndarray:
    cols = im2col(x, w.shape[1], w.shape[2], stride, pad, dil)
    y = np.einsum("bcklij,ckl->bcij", cols, w, optimize=True)
    y += bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(y, dtype=x.dtype)


def depthwise_backward_input(gy: np.ndarray, w: np.ndarray, h: int, w_in: int,
                             stride: int, pad: int, dil: int = 1) -> np.ndarray:
    # gcols[b,c,k,l,i,j] = w[c,k,l] * gy[b,c,i,j]
    gcols = np.einsum("ckl,bcij->bcklij", w, gy, optimize=True)
    return col2im_add(np.ascontiguousarray(gcols, dtype=gy.dtype), h, w_in, stride, pad, dil)


def depthwise_backward_weights(x: np.ndarray, gy: np.ndarray, kh: int, kw: int,
                               stride: int, pad: int, dil: int = 1):
    cols = im2col(x, kh, kw, stride, pad, dil)
    gw = np.einsum("bcklij,bcij->ckl", cols, gy, optimize=True)
    gb = gy.sum(axis=(0, 2, 3))
    return gw.astype(x.dtype, copy=False), gb.astype(x.dtype, copy=False)
