"""Functional CNN building blocks with explicit forward caches.

Every op is a pure function pair ``*_forward(x, ...) -> (y, cache)`` and
``*_backward(dy, cache) -> gradients``; the model graph in
:mod:`sparsect.neural.model` strings them together.  All math runs in the
input dtype, so float64 models support tight finite-difference checks.

Convolutions use the correlation convention (no kernel flip) and are
evaluated as im2col plus batched matmul.  Padding is zeros by default;
"circular" padding exists for translation-consistency testing.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_4d(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4D (n, c, h, w) array, got shape {x.shape}")


def conv3_forward(x, w, b, pad_mode="zeros"):
    """3x3 same-size convolution; w has shape (c_out, c_in, 3, 3)."""
    _check_4d(x, "conv3")
    n, ci, h, wd = x.shape
    co = w.shape[0]
    if w.shape != (co, ci, 3, 3):
        raise ShapeError(f"conv3 weight shape {w.shape} does not match input channels {ci}")
    mode = "wrap" if pad_mode == "circular" else "constant"
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode=mode)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, ci * 9, h * wd)
    y = np.matmul(w.reshape(co, ci * 9), cols).reshape(n, co, h, wd)
    y = y + b.reshape(1, co, 1, 1)
    return y, (cols, x.shape, w, pad_mode)


def conv3_backward(dy, cache):
    cols, x_shape, w, pad_mode = cache
    n, ci, h, wd = x_shape
    co = w.shape[0]
    dy2 = dy.reshape(n, co, h * wd)
    db = dy.sum(axis=(0, 2, 3))
    dw = np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    dcols = np.matmul(w.reshape(co, ci * 9).T, dy2)
    dc6 = dcols.reshape(n, ci, 3, 3, h, wd)
    dxp = np.zeros((n, ci, h + 2, wd + 2), dtype=dy.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky : ky + h, kx : kx + wd] += dc6[:, :, ky, kx]
    if pad_mode == "circular":
        dxp[:, :, 1, :] += dxp[:, :, h + 1, :]
        dxp[:, :, h, :] += dxp[:, :, 0, :]
        dxp[:, :, :, 1] += dxp[:, :, :, wd + 1]
        dxp[:, :, :, wd] += dxp[:, :, :, 0]
    dx = dxp[:, :, 1 : h + 1, 1 : wd + 1]
    return dx, dw, db


def conv1_forward(x, w, b):
    """1x1 convolution; w has shape (c_out, c_in, 1, 1)."""
    _check_4d(x, "conv1")
    n, ci, h, wd = x.shape
    co = w.shape[0]
    if w.shape != (co, ci, 1, 1):
        raise ShapeError(f"conv1 weight shape {w.shape} does not match input channels {ci}")
    y = np.matmul(w.reshape(co, ci), x.reshape(n, ci, h * wd)).reshape(n, co, h, wd)
    y = y + b.reshape(1, co, 1, 1)
    return y, (x, w)


def conv1_backward(dy, cache):
    x, w = cache
    n, ci, h, wd = x.shape
    co = w.shape[0]
    dy2 = dy.reshape(n, co, h * wd)
    db = dy.sum(axis=(0, 2, 3))
    dw = np.matmul(dy2, x.reshape(n, ci, h * wd).transpose(0, 2, 1)).sum(axis=0)
    dx = np.matmul(w.reshape(co, ci).T, dy2).reshape(x.shape)
    return dx, dw.reshape(w.shape), db


def bn_forward(x, gamma, beta, state, training):
    """Per-channel batch normalization over the (n, h, w) axes.

    In training mode batch statistics normalize the input and the running
    statistics in ``state`` are updated in place; in eval mode the running
    statistics are used and ``state`` is untouched.
    """
    _check_4d(x, "bn")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        state["mean"][...] = (1.0 - BN_MOMENTUM) * state["mean"] + BN_MOMENTUM * mean
        state["var"][...] = (1.0 - BN_MOMENTUM) * state["var"] + BN_MOMENTUM * var
    else:
        mean = state["mean"]
        var = state["var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    cache = (xhat, inv, gamma) if training else None
    return y, cache


def bn_backward(dy, cache):
    xhat, inv, gamma = cache
    n, c, h, w = dy.shape
    m = n * h * w
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma.reshape(1, -1, 1, 1)
    s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    dx = (inv.reshape(1, -1, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def pool_forward(x):
    """2x2 average pooling; spatial dims must be even."""
    _check_4d(x, "pool")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool needs even spatial dims, got {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return y, x.shape


def pool_backward(dy, x_shape):
    g = np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3)
    return (g * 0.25).astype(dy.dtype, copy=False)


def upsample_forward(x):
    """2x nearest-neighbor upsampling."""
    _check_4d(x, "upsample")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape


def upsample_backward(dy, x_shape):
    n, c, h, w = x_shape
    return dy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def concat_forward(x, skip):
    if x.shape[0] != skip.shape[0] or x.shape[2:] != skip.shape[2:]:
        raise ShapeError(
            f"concat operands disagree: {x.shape} vs {skip.shape}"
        )
    return np.concatenate([x, skip], axis=1), x.shape[1]


def concat_backward(dy, c_main):
    return dy[:, :c_main], dy[:, c_main:]
