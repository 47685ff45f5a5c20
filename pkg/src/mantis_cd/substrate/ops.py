"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new Tensor whose backward closure maps the output gradient to one gradient
per parent.  Image tensors use B x C x H x W layout.
"""
import numpy as np

from . import kernels
from .tensor import DTYPE, Tensor, unbroadcast


def _t(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


# elementwise --------------------------------------------------------------------------

def add(a, b):
    a, b = _t(a), _t(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _t(a), _t(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _t(a), _t(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _t(a), _t(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def exp(x):
    x = _t(x)
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x):
    x = _t(x)
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    x = _t(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = _t(x)
    # split by sign so large |x| never overflows exp
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x, lo, hi):
    """Clamp to ``[lo, hi]``; gradient passes where ``lo <= x <= hi``."""
    x = _t(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def softmax(x, axis=1):
    x = _t(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


# reductions and shape -----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=DTYPE), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = _t(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes, keepdims), 1.0 / n)


def reshape(x, shape):
    x = _t(x)
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=1):
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for i in range(len(tensors)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return Tensor._make(out, tuple(tensors), backward)


def take_channel(x, index):
    """Select one channel of a B x C x H x W tensor, keeping the channel axis."""
    x = _t(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, index : index + 1] = g
        return (full,)

    return Tensor._make(x.data[:, index : index + 1].copy(), (x,), backward)


# dense ---------------------------------------------------------------------------------

def linear(x, w, b=None):
    """``x @ w.T + b`` for x of shape (N, in) and w of shape (out, in)."""
    x, w = _t(x), _t(w)
    out = x.data @ w.data.T
    parents = (x, w)
    if b is not None:
        b = _t(b)
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


# convolution ---------------------------------------------------------------------------

def conv_output_size(n, kernel, pad, stride):
    """floor((n + 2 pad - kernel) / stride) + 1; raises when the kernel does not fit."""
    span = n + 2 * pad - kernel
    if span < 0 or stride < 1:
        raise ValueError(f"kernel={kernel}, pad={pad}, stride={stride} do not fit a spatial size of {n}")
    return span // stride + 1


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    """Grouped 2D convolution (cross-correlation), weights shaped (O, C/groups, k, k)."""
    x, w = _t(x), _t(w)
    bsz, c, h, wd = x.shape
    o, cg, k, k2 = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if c % groups or o % groups:
        raise ValueError(f"groups={groups} must divide in={c} and out={o} channels")
    if cg * groups != c:
        raise ValueError(f"weight expects {cg * groups} input channels, got {c}")
    ho = conv_output_size(h, k, pad, stride)
    wo = conv_output_size(wd, k, pad, stride)
    og = o // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x.data)
    hp, wp = xp.shape[2:]
    cols = kernels.im2col(xp, k, stride, ho, wo)
    cols_g = cols.reshape(groups, cg * k * k, bsz * ho * wo)
    w_g = w.data.reshape(groups, og, cg * k * k)
    out = np.matmul(w_g, cols_g).reshape(o, bsz, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    parents = (x, w)
    if b is not None:
        b = _t(b)
        out += b.data.reshape(1, o, 1, 1)
        parents = (x, w, b)

    def backward(g):
        g_g = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(groups, og, bsz * ho * wo)
        gw = np.matmul(g_g, cols_g.transpose(0, 2, 1)).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w_g.transpose(0, 2, 1), g_g).reshape(c * k * k, bsz * ho * wo)
            gxp = kernels.col2im(gcols, bsz, c, hp, wp, k, stride, ho, wo)
            gx = gxp[:, :, pad : hp - pad, pad : wp - pad] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """GroupNorm over (C/groups, H, W) per sample; gamma/beta are per channel."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    shape = x.shape
    bsz, c = shape[:2]
    if c % groups:
        raise ValueError(f"groups={groups} does not divide {c} channels")
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(shape)
    bshape = (1, c) + (1,) * (len(shape) - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        red = (0,) + tuple(range(2, len(shape)))
        ggamma = (g * xhat).sum(axis=red).reshape(gamma.shape)
        gbeta = g.sum(axis=red).reshape(beta.shape)
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.data.reshape(bshape)).reshape(bsz, groups, -1)
            xh = xhat.reshape(bsz, groups, -1)
            gx = inv * (
                gxhat
                - gxhat.mean(axis=2, keepdims=True)
                - xh * (gxhat * xh).mean(axis=2, keepdims=True)
            )
            gx = gx.reshape(shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


# resampling ----------------------------------------------------------------------------

def bilinear_resize2d(x, scale=2):
    """Bilinear x2 upsampling with half-pixel centres and edge clamping."""
    x = _t(x)
    if scale != 2:
        raise ValueError("only scale=2 is supported")
    if x.ndim != 4 or min(x.shape[2:]) < 1:
        raise ValueError(f"expected a B x C x H x W tensor with H, W >= 1, got {x.shape}")
    out = kernels.upsample2x(np.ascontiguousarray(x.data))
    return Tensor._make(out, (x,), lambda g: (kernels.upsample2x_backward(np.ascontiguousarray(g)),))


def _pair(size):
    return (size, size) if isinstance(size, (int, np.integer)) else tuple(size)


def max_pool2d(x, size):
    """Non-overlapping max pooling; ``size`` is an int or (kh, kw) dividing H, W."""
    x = _t(x)
    kh, kw = _pair(size)
    b, c, h, w = x.shape
    if h % kh or w % kw:
        raise ValueError(f"pool size {(kh, kw)} does not divide spatial dims {h}x{w}")
    blocks = x.data.reshape(b, c, h // kh, kh, w // kw, kw)
    out = blocks.max(axis=(3, 5))

    def backward(g):
        # ties: gradient goes to the first maximal element of each window
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // kh, w // kw, kh * kw)
        arg = flat.argmax(axis=-1)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        gx = onehot * g[..., None]
        gx = gx.reshape(b, c, h // kh, w // kw, kh, kw).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(b, c, h, w),)

    return Tensor._make(out, (x,), backward)


def upsample_nearest(x, size):
    """Repeat each pixel ``size`` (int or (kh, kw)) times along H and W."""
    x = _t(x)
    kh, kw = _pair(size)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, kh, axis=2), kw, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, kh, w, kw).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward)
