"""Forward/backward kernels for the UNet, NCHW layout.

Kernels are stored as (kh, kw, c_in, c_out). Each ``*_backward`` takes the
cache returned by its forward and the upstream gradient.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def conv2d(x, w, b):
    """Stride-1 cross-correlation with zero 'same' padding for odd kernels.

    Internally the padded input is laid out as a (C, B*Hp*Wp) matrix so that
    each kernel tap is one GEMM against a shifted, copy-free slice. Outputs
    computed at padding positions are discarded.
    """
    kh, kw, cin, cout = w.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} does not have {cin} channels")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel extents must be odd")
    bsz, _, h, wd = x.shape
    ph, pw = kh // 2, kw // 2
    hp, wp = h + 2 * ph, wd + 2 * pw
    xp = np.zeros((cin, bsz, hp, wp), dtype=np.result_type(x, w))
    xp[:, :, ph : ph + h, pw : pw + wd] = x.transpose(1, 0, 2, 3)
    flat = xp.reshape(cin, -1)
    span = flat.shape[1] - ((kh - 1) * wp + (kw - 1))
    acc = np.zeros((cout, flat.shape[1]), dtype=flat.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            acc[:, :span] += w[i, j].T @ flat[:, off : off + span]
    out = acc.reshape(cout, bsz, hp, wp)[:, :, :h, :wd].transpose(1, 0, 2, 3) + b[None, :, None, None]
    return np.ascontiguousarray(out), (flat, w, x.shape)


def conv2d_backward(cache, g):
    flat, w, shape = cache
    kh, kw, cin, cout = w.shape
    bsz, _, h, wd = shape
    ph, pw = kh // 2, kw // 2
    hp, wp = h + 2 * ph, wd + 2 * pw
    gp = np.zeros((cout, bsz, hp, wp), dtype=flat.dtype)
    gp[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
    gflat = gp.reshape(cout, -1)
    span = flat.shape[1] - ((kh - 1) * wp + (kw - 1))
    gs = gflat[:, :span]
    dw = np.empty_like(w)
    dflat = np.zeros_like(flat)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            dw[i, j] = flat[:, off : off + span] @ gs.T
            dflat[:, off : off + span] += w[i, j] @ gs
    db = g.sum(axis=(0, 2, 3))
    dx = dflat.reshape(cin, bsz, hp, wp)[:, :, ph : ph + h, pw : pw + wd].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw, db


def relu(x):
    return np.maximum(x, 0), x


def relu_backward(x, g):
    # subgradient at exactly 0 is 0
    return g * (x > 0)


def maxpool2(x):
    """2x2 / stride-2 max pooling.

    Returns the pooled tensor and, per output cell, the flat index of the
    winning input pixel within its (H*W) plane. Ties go to the first element
    of the window in row-major order.
    """
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    win = x.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, w // 2, 4)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + local // 2
    cols = 2 * np.arange(w // 2)[None, :] + local % 2
    return out, (rows * w + cols, x.shape)


def maxpool2_backward(cache, g):
    flat, shape = cache
    bsz, c, h, w = shape
    dx = np.zeros((bsz, c, h * w), dtype=g.dtype)
    np.put_along_axis(dx, flat.reshape(bsz, c, -1), g.reshape(bsz, c, -1), axis=-1)
    return dx.reshape(shape)


def convtranspose2(x, w, b):
    """Transposed convolution, 2x2 kernel, stride 2 (doubles H and W)."""
    kh, kw, cin, cout = w.shape
    if (kh, kw) != (2, 2):
        raise ShapeError("convtranspose2: kernel must be 2x2")
    if x.ndim != 4 or x.shape[1] != cin:
        raise ShapeError(f"convtranspose2: input {x.shape} does not have {cin} channels")
    bsz, _, h, wd = x.shape
    t = np.tensordot(x, w, axes=([1], [2]))  # B, H, W, 2, 2, O
    out = t.transpose(0, 5, 1, 3, 2, 4).reshape(bsz, cout, 2 * h, 2 * wd) + b[None, :, None, None]
    return out, (x, w)


def convtranspose2_backward(cache, g):
    x, w = cache
    bsz, cin, h, wd = x.shape
    cout = w.shape[3]
    g6 = g.reshape(bsz, cout, h, 2, wd, 2)
    dx = np.tensordot(g6, w, axes=([1, 3, 5], [3, 0, 1])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, g6, axes=([0, 2, 3], [0, 2, 4])).transpose(2, 3, 0, 1)
    db = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} and {b.shape} disagree on batch/spatial extents")
    return np.concatenate((a, b), axis=1), a.shape[1]


def split_channels(boundary, g):
    return g[:, :boundary], g[:, boundary:]


def mse_loss(prediction, target):
    """Mean-square error over all elements and its gradient."""
    if prediction.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {prediction.shape} and {target.shape} differ")
    diff = prediction - target
    count = diff.size
    return float(np.sum(diff * diff) / count), (2.0 / count) * diff
