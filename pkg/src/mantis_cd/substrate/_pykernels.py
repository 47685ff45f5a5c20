"""Pure numpy implementations of the hot kernels.

These are the fallback when the compiled ``_ckernels`` extension is not
available and also serve as the reference the compiled kernels are tested
against.  All arrays are C-contiguous float64.

Column layout used by ``im2col``/``col2im``: rows are ordered
``(channel, kernel_row, kernel_col)`` and columns ``(batch, out_row, out_col)``
so a grouped convolution is a batched matmul over channel groups.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def im2col(xp, k, stride, ho, wo):
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (B, C, Ho, Wo, k, k) -> (C, k, k, B, Ho, Wo)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(c * k * k, b * ho * wo)


def col2im(cols, b, c, hp, wp, k, stride, ho, wo):
    out = np.zeros((b, c, hp, wp))
    cols6 = cols.reshape(c, k, k, b, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for ki in range(k):
        hs = slice(ki, ki + stride * (ho - 1) + 1, stride)
        for kj in range(k):
            ws = slice(kj, kj + stride * (wo - 1) + 1, stride)
            out[:, :, hs, ws] += cols6[:, :, ki, kj]
    return out


def _up_last(x):
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    return np.stack([even, odd], axis=-1).reshape(x.shape[:-1] + (2 * x.shape[-1],))


def _up_last_backward(g):
    ge = g[..., 0::2]
    go = g[..., 1::2]
    gin = 0.75 * (ge + go)
    gin[..., :-1] += 0.25 * ge[..., 1:]
    gin[..., :1] += 0.25 * ge[..., :1]
    gin[..., 1:] += 0.25 * go[..., :-1]
    gin[..., -1:] += 0.25 * go[..., -1:]
    return gin


def upsample2x(x):
    y = _up_last(x)
    y = _up_last(y.swapaxes(-1, -2)).swapaxes(-1, -2)
    return np.ascontiguousarray(y)


def upsample2x_backward(g):
    gx = _up_last_backward(g.swapaxes(-1, -2)).swapaxes(-1, -2)
    gx = _up_last_backward(np.ascontiguousarray(gx))
    return np.ascontiguousarray(gx)
