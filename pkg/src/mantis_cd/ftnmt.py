"""Fractal Tanimoto similarity and loss.

For fuzzy vectors p, l in [0, 1] the depth-d similarity has the closed form

    T^d(p, l) = p.l / (2^d (p.p + l.l) - (2^(d+1) - 1) p.l)

which is evaluated as p.l / (2^d |p - l|^2 + p.l): the same value, but
never above 1 in floating point and exactly 1 when p = l.  The complement
pair (1-p, 1-l) has the same |p - l|^2, so it is computed once.

``ftnmt_complement`` averages T^d on (p, l) and on (1-p, 1-l);
``ftnmt_avg`` averages the complemented form over depths 0..d-1.
"""
from dataclasses import dataclass
import os

import numpy as np

from .substrate import ops
from .substrate.tensor import Tensor

DEFAULT_SMOOTH = 1e-5
CHECK_RANGE = os.environ.get("MANTIS_CD_DEBUG", "") not in ("", "0")


@dataclass(frozen=True)
class FTConfig:
    depth: float = 0
    axes: tuple = (1, 2, 3)
    smooth: float = DEFAULT_SMOOTH

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if not self.axes:
            raise ValueError("axes must be non-empty")
        if self.smooth < 0:
            raise ValueError("smooth must be >= 0")
        object.__setattr__(self, "axes", tuple(self.axes))

    def with_depth(self, depth):
        return FTConfig(depth, self.axes, self.smooth)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check(p, l, axes):
    if p.shape != l.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {l.shape}")
    for a in axes:
        if not -p.ndim <= a < p.ndim:
            raise ValueError(f"axis {a} invalid for rank {p.ndim}")
    if CHECK_RANGE:
        for t in (p, l):
            if t.data.min() < 0 or t.data.max() > 1:
                raise ValueError("entries must lie in [0, 1]")


def _dot(a, b, axes):
    return ops.sum(a * b, axis=axes, keepdims=True)


def _from_dots(tpl, dist, depth, smooth):
    num = tpl + smooth
    return num / (dist * 2.0**depth + num)


def tanimoto_d(p, l, cfg=FTConfig()):
    """Depth-``cfg.depth`` fractal Tanimoto reduced over ``cfg.axes`` (dims kept)."""
    p, l = _as_tensor(p), _as_tensor(l)
    _check(p, l, cfg.axes)
    diff = p - l
    return _from_dots(_dot(p, l, cfg.axes), _dot(diff, diff, cfg.axes), cfg.depth, cfg.smooth)


def ftnmt_complement(p, l, cfg=FTConfig()):
    """Fractal Tanimoto with complement: mean of T^d(p, l) and T^d(1-p, 1-l)."""
    p, l = _as_tensor(p), _as_tensor(l)
    _check(p, l, cfg.axes)
    return (tanimoto_d(p, l, cfg) + tanimoto_d(1.0 - p, 1.0 - l, cfg)) * 0.5


def _depth_terms(depth):
    if float(depth) != int(depth):
        raise ValueError(f"the depth average needs an integer depth, got {depth}")
    depth = int(depth)
    return range(max(depth, 1))


def ftnmt_avg(p, l, cfg=FTConfig()):
    """Mean of the complemented similarity over depths 0..d-1 (depth 0 gives FT^0).

    The three reductions are computed once; only the scalar-per-index
    closed form is evaluated per depth.
    """
    p, l = _as_tensor(p), _as_tensor(l)
    _check(p, l, cfg.axes)
    terms = _depth_terms(cfg.depth)
    ax = cfg.axes
    diff = p - l
    tpl, dist = _dot(p, l, ax), _dot(diff, diff, ax)
    cpl = _dot(1.0 - p, 1.0 - l, ax)
    total = None
    for i in terms:
        term = _from_dots(tpl, dist, i, cfg.smooth) + _from_dots(cpl, dist, i, cfg.smooth)
        total = term if total is None else total + term
    return total * (0.5 / len(terms))


def ftnmt_loss(pred, target, depth=0, smooth=DEFAULT_SMOOTH):
    """1 - <FT>^depth, reduced over every non-batch axis then averaged over the batch."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    axes = tuple(range(1, pred.ndim))
    sim = ftnmt_avg(pred, target, FTConfig(depth, axes, smooth))
    return 1.0 - ops.mean(sim)


def tanimoto_recursive_oracle(p, l, depth, axis=-1):
    """Evaluate T^d through its defining recursion (numpy, no smoothing).

    T^0 is the plain Tanimoto coefficient; T^d(x, y) divides T^{d-1}(x, y) by
    T^{d-1}(x, x) + T^{d-1}(y, y) - T^{d-1}(x, y).  Sub-results are memoised
    per (depth, operand pair) so the cost is linear in ``depth``.
    """
    if int(depth) != depth or depth < 0:
        raise ValueError("depth must be a non-negative integer")
    if depth > 12:
        raise ValueError("recursion depth is limited to 12")
    p = np.asarray(p, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if p.shape != l.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {l.shape}")
    operands = {"p": p, "l": l}
    memo = {}

    def T(d, x, y):
        key = (d, x, y)
        if key in memo:
            return memo[key]
        if d == 0:
            a, b = operands[x], operands[y]
            ab = (a * b).sum(axis=axis)
            val = ab / ((a * a).sum(axis=axis) + (b * b).sum(axis=axis) - ab)
        else:
            val = T(d - 1, x, y) / (T(d - 1, x, x) + T(d - 1, y, y) - T(d - 1, x, y))
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"non-finite intermediate at depth {d} ({x},{y})")
        memo[key] = val
        return val

    with np.errstate(divide="ignore", invalid="ignore"):
        return T(int(depth), "p", "l")


def closed_form_numpy(p, l, depth, axis=-1, smooth=0.0):
    """The closed form written literally in terms of p.p, l.l and p.l (an oracle)."""
    p = np.asarray(p, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    tpl = (p * l).sum(axis=axis)
    tpp = (p * p).sum(axis=axis)
    tll = (l * l).sum(axis=axis)
    scale = 2.0**depth
    return (tpl + smooth) / (scale * (tpp + tll) - (2 * scale - 1) * tpl + smooth)


def ftnmt_avg_numpy(p, l, depth, axis=-1, smooth=DEFAULT_SMOOTH):
    """:func:`ftnmt_avg` on plain arrays, reducing over one ``axis``."""
    terms = _depth_terms(depth)
    p = np.asarray(p, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    tpl = (p * l).sum(axis=axis)
    cpl = ((1 - p) * (1 - l)).sum(axis=axis)
    dist = ((p - l) ** 2).sum(axis=axis)
    acc = 0.0
    for i in terms:
        acc = acc + 0.5 * (_from_dots(tpl, dist, i, smooth) + _from_dots(cpl, dist, i, smooth))
    return acc / len(terms)
