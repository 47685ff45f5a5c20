"""Module container and the normed layers every block is built from."""
import math

import numpy as np

from . import ops
from .tensor import Parameter


def _rng(rng):
    if rng is None:
        return np.random.default_rng(0)
    if isinstance(rng, (int, np.integer)):
        return np.random.default_rng(int(rng))
    return rng


def norm_groups(channels):
    """Group count for GroupNorm: 8 groups from 8 channels up, else 1.

    Channel counts >= 8 that 8 does not divide use the largest common divisor.
    """
    if channels < 8:
        return 1
    return math.gcd(channels, 8)


class Module:
    """Minimal parameter container; subclasses implement ``forward``."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        seen = set()
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def _walk(value, name, seen):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            value.name = value.name or name
            yield name, value
    elif isinstance(value, Module):
        for sub, v in vars(value).items():
            yield from _walk(v, f"{name}.{sub}", seen)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}", seen)
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}", seen)


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class GroupNorm(Module):
    def __init__(self, channels, groups=None, eps=1e-5):
        self.channels = channels
        self.groups = groups or norm_groups(channels)
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        return ops.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, pad=1, stride=1, groups=1, bias=True, rng=None):
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"groups={groups} must divide {in_channels} -> {out_channels}")
        rng = _rng(rng)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel, self.pad, self.stride, self.groups = kernel, pad, stride, groups
        fan_in = in_channels // groups * kernel * kernel
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class Conv2DN(Module):
    """Convolution followed by GroupNorm, no activation."""

    def __init__(self, in_channels, out_channels, kernel=3, pad=1, stride=1, groups=1, rng=None):
        self.conv = Conv2d(in_channels, out_channels, kernel, pad, stride, groups, bias=False, rng=rng)
        self.norm = GroupNorm(out_channels)

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x):
        return self.norm(self.conv(x))


def conv2d_norm(x, weight, gamma, beta, stride=1, pad=0, groups=1, norm_groups_=None, eps=1e-5):
    """Functional form of :class:`Conv2DN` for explicit weight tensors."""
    out_channels = weight.shape[0]
    y = ops.conv2d(x, weight, None, stride, pad, groups)
    return ops.group_norm(y, gamma, beta, norm_groups_ or norm_groups(out_channels), eps)


class Dense(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None):
        rng = _rng(rng)
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class DenseN(Module):
    """Dense layer followed by GroupNorm over the feature axis."""

    def __init__(self, in_features, out_features, rng=None):
        self.dense = Dense(in_features, out_features, bias=False, rng=rng)
        self.norm = GroupNorm(out_features)

    def forward(self, x):
        return self.norm(self.dense(x))
