"""Convolution and pooling primitives for the gaze network.

im2col formulations so the heavy lifting lands in BLAS matmuls.  Arrays
are NCHW, C-contiguous, float32 (float64 in gradient-check mode); weights
are (Co, Ci, kh, kw); fully deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, ci, ho, wo = win.shape[:4]
    # (N*Ho*Wo, Ci*kh*kw), contiguous for the matmul
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x, w, b, stride, pad):
    """Cross-correlation of an NCHW batch with (Co, Ci, kh, kw) filters."""
    n = x.shape[0]
    co, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(co, -1).T
    y += b
    return np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, dy, stride, pad):
    """Gradients (dx, dw, db) of conv2d_forward for upstream gradient dy."""
    n, _, h, width = x.shape
    co, ci, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    dyr = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)

    db = dy.sum(axis=(0, 2, 3))
    dw = (dyr.T @ cols).reshape(co, ci, kh, kw)

    dcols = (dyr @ w.reshape(co, -1)).reshape(n, ho, wo, ci, kh, kw)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (N, Ci, kh, kw, Ho, Wo)
    dxp = np.zeros((n, ci, h + 2 * pad, width + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dcols[:, :, i, j]
            )
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dw, db


def maxpool2d_forward(x, k, stride):
    """Max pooling; returns (pooled, argmax) with flat H*W input indices."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    oy = np.arange(ho)[:, None] * stride
    ox = np.arange(wo)[None, :] * stride
    idx = (oy + arg // k) * w + (ox + arg % k)
    return np.ascontiguousarray(y), np.ascontiguousarray(idx.astype(np.int64))


def maxpool2d_backward(dy, idx, h, w):
    """Scatter upstream gradients back to the argmax positions."""
    n, c = dy.shape[0], dy.shape[1]
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    np.add.at(
        dx,
        (np.arange(n)[:, None, None], np.arange(c)[None, :, None], idx.reshape(n, c, -1)),
        dy.reshape(n, c, -1),
    )
    return dx.reshape(n, c, h, w)
