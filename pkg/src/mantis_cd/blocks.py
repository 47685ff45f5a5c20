"""Feature extraction units: FracTAL ResNet, CEECNet V1/V2 and their pieces.

Every unit accepts ``attention=False`` to drop its attention branches; with
all gamma scalars at their zero initialisation this gives bit-identical
outputs, which the tests rely on.
"""
from dataclasses import dataclass

from .attention import DEFAULT_FT_DEPTH, FracTALAttention, Fusion, self_fusion, zero_gamma
from .substrate import ops
from .substrate.nn import Conv2d, Conv2DN, GroupNorm, Module, _rng

VARIANTS = ("fractal_resnet", "ceecnet_v1", "ceecnet_v2")


def heads_for(channels):
    """Heads follow the channel width: one head per 8 channels, at least one."""
    return max(1, channels // 8)


@dataclass
class UnitConfig:
    nf: int
    heads: int = None
    ft_depth: float = DEFAULT_FT_DEPTH
    variant: str = "fractal_resnet"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.heads is None:
            self.heads = heads_for(self.nf)
        if self.variant != "fractal_resnet" and self.nf % 4:
            raise ValueError(f"CEECNet units need nf divisible by 4, got {self.nf}")


class ResBlock(Module):
    """Pre-activation residual branch: (GN, ReLU, Conv, GN, ReLU, Conv)."""

    def __init__(self, channels, rng=None):
        rng = _rng(rng)
        self.norm1 = GroupNorm(channels)
        self.conv1 = Conv2d(channels, channels, 3, 1, bias=False, rng=rng)
        self.norm2 = GroupNorm(channels)
        self.conv2 = Conv2d(channels, channels, 3, 1, bias=False, rng=rng)

    def forward(self, x):
        out = self.conv1(ops.relu(self.norm1(x)))
        return self.conv2(ops.relu(self.norm2(out)))


class FracTALResUnit(Module):
    """(x + ResBlock(x)) * (1 + gamma * Att(x, x, x))."""

    def __init__(self, channels, heads=None, ft_depth=DEFAULT_FT_DEPTH, attention=True, rng=None):
        rng = _rng(rng)
        self.channels = channels
        self.attention = attention
        self.res = ResBlock(channels, rng=rng)
        self.att = FracTALAttention(channels, heads or heads_for(channels), ft_depth, rng=rng)
        self.gamma = zero_gamma()

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        out = x + self.res(x)
        if not self.attention:
            return out
        return self_fusion(out, self.att(x, x, x), self.gamma)


def _require_even(x):
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")


class Compress(Module):
    """Stride-2 Conv2DN then stride-1 Conv2DN, ReLU after each: halves H and W."""

    def __init__(self, in_channels, out_channels, rng=None):
        rng = _rng(rng)
        self.conv1 = Conv2DN(in_channels, out_channels, 3, 1, 2, rng=rng)
        self.conv2 = Conv2DN(out_channels, out_channels, 3, 1, 1, rng=rng)

    def forward(self, x):
        _require_even(x)
        return ops.relu(self.conv2(ops.relu(self.conv1(x))))


class Expand(Module):
    """Bilinear x2, then two grouped 3x3 Conv2DN with ReLU."""

    def __init__(self, in_channels, out_channels, heads=1, rng=None):
        rng = _rng(rng)
        self.conv1 = Conv2DN(in_channels, out_channels, 3, 1, 1, groups=heads, rng=rng)
        self.conv2 = Conv2DN(out_channels, out_channels, 3, 1, 1, groups=heads, rng=rng)

    def forward(self, x):
        out = ops.relu(self.conv1(ops.bilinear_resize2d(x)))
        return ops.relu(self.conv2(out))


class ExpandNCombine(Module):
    """Upsample the low-resolution input, then merge it with a skip layer.

    V1 merges with concat + Conv2DN; with ``fusion=True`` (V2) the merge is a
    relative attention :class:`Fusion`.
    """

    def __init__(self, in_channels, out_channels, heads=1, fusion=False, ft_depth=DEFAULT_FT_DEPTH,
                 attention=True, rng=None):
        rng = _rng(rng)
        self.conv1 = Conv2DN(in_channels, out_channels, 3, 1, 1, groups=heads, rng=rng)
        self.fusion = fusion
        if fusion:
            self.combine = Fusion(out_channels, heads, ft_depth, attention=attention, rng=rng)
        else:
            self.combine = Conv2DN(2 * out_channels, out_channels, 3, 1, 1, groups=heads, rng=rng)

    def forward(self, low, skip):
        out = ops.relu(self.conv1(ops.bilinear_resize2d(low)))
        if out.shape != skip.shape:
            raise ValueError(f"upsampled {out.shape} does not match skip {skip.shape}")
        if self.fusion:
            return ops.relu(self.combine(out, skip))
        return ops.relu(self.combine(ops.concat([out, skip], axis=1)))


class CEECNetUnit(Module):
    """Compress-Expand / Expand-Compress unit with relative and self attention.

    CE branch (nf/2 channels, dips to H/2) and EC branch (nf/2 channels,
    peaks at 2H) exchange information through two relative attentions, are
    collected back to nf channels and combined with the input as
    (x + collected) * (1 + g1 * Att(x, x, x)).
    """

    def __init__(self, channels, heads=None, ft_depth=DEFAULT_FT_DEPTH, variant="ceecnet_v1",
                 attention=True, rng=None):
        if channels % 4:
            raise ValueError(f"CEECNet units need channels divisible by 4, got {channels}")
        if variant not in ("ceecnet_v1", "ceecnet_v2"):
            raise ValueError(f"unknown CEECNet variant {variant!r}")
        rng = _rng(rng)
        nf, half, quarter = channels, channels // 2, channels // 4
        heads = heads or heads_for(nf)
        v2 = variant == "ceecnet_v2"
        self.channels, self.variant, self.attention = nf, variant, attention
        self.shape_log = None

        # compress-expand
        self.conv1 = Conv2DN(nf, half, 3, 1, rng=rng)
        self.compress1 = Compress(half, nf, rng=rng)
        self.expand1 = ExpandNCombine(nf, half, heads, fusion=v2, ft_depth=ft_depth, attention=attention, rng=rng)
        # expand-compress
        self.conv2 = Conv2DN(nf, half, 3, 1, rng=rng)
        self.expand2 = Expand(half, quarter, heads, rng=rng)
        self.compr21 = Conv2DN(quarter, half, 3, 1, 2, rng=rng)
        if v2:
            self.compr22 = Fusion(half, heads, ft_depth, attention=attention, rng=rng)
        else:
            self.compr22 = Conv2DN(nf, half, 3, 1, 1, rng=rng)

        self.collect = Conv2DN(nf, nf, 3, 1, 1, rng=rng)
        self.att = FracTALAttention(nf, heads, ft_depth, rng=rng)
        self.ratt12 = FracTALAttention(half, heads, ft_depth, rng=rng)
        self.ratt21 = FracTALAttention(half, heads, ft_depth, rng=rng)
        self.gamma1 = zero_gamma()
        self.gamma2 = zero_gamma()
        self.gamma3 = zero_gamma()

    def _log(self, name, t):
        if self.shape_log is not None:
            self.shape_log.append((name, tuple(t.shape)))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        _require_even(x)
        b, nf, h, w = x.shape

        # compress-expand
        out10 = self.conv1(x)
        out1 = self.compress1(out10)
        assert out1.shape == (b, nf, h // 2, w // 2)
        assert out1.size * 2 == out10.size, "CE bottom must hold half the volume of its input"
        self._log("ce_in", out10)
        self._log("ce_bottom", out1)
        out1 = ops.relu(self.expand1(out1, out10))
        assert out1.shape == out10.shape

        # expand-compress
        out20 = self.conv2(x)
        out2 = self.expand2(out20)
        assert out2.shape == (b, nf // 4, 2 * h, 2 * w)
        assert out2.size == 2 * out20.size, "EC top must hold double the volume of its input"
        self._log("ec_in", out20)
        self._log("ec_top", out2)
        out2 = ops.relu(out2)
        out2 = ops.relu(self.compr21(out2))
        if self.variant == "ceecnet_v2":
            out2 = ops.relu(self.compr22(out2, out20))
        else:
            out2 = ops.relu(self.compr22(ops.concat([out2, out20], axis=1)))
        assert out2.shape == out20.shape
        self._log("ce_out", out1)
        self._log("ec_out", out2)

        if self.attention:
            out122 = self_fusion(out1, self.ratt12(out1, out2, out2), self.gamma2)
            out211 = self_fusion(out2, self.ratt21(out2, out1, out1), self.gamma3)
        else:
            out122, out211 = out1, out2
        collected = ops.relu(self.collect(ops.concat([out122, out211], axis=1)))
        assert collected.shape == x.shape
        out = x + collected
        if not self.attention:
            return out
        return self_fusion(out, self.att(x, x, x), self.gamma1)


class DownscaleTransition(Module):
    """Stride-2 Conv2DN without activation."""

    def __init__(self, in_channels, out_channels, rng=None):
        self.conv = Conv2DN(in_channels, out_channels, 3, 1, 2, rng=rng)

    def forward(self, x):
        _require_even(x)
        return self.conv(x)


class PSPPooling(Module):
    """Pyramid pooling: max pools over 1, 1/2, 1/4 and 1/8 of the extent.

    Each level is reduced to C/4 channels by a 1x1 Conv2DN, brought back to
    full size by nearest upsampling, and the four are concatenated and mixed
    by a 1x1 Conv2DN back to C channels.
    """

    FRACTIONS = (1, 2, 4, 8)

    def __init__(self, channels, rng=None):
        if channels % 4:
            raise ValueError(f"channels must be divisible by 4, got {channels}")
        rng = _rng(rng)
        self.channels = channels
        self.reduce = [Conv2DN(channels, channels // 4, 1, 0, rng=rng) for _ in self.FRACTIONS]
        self.mix = Conv2DN(channels, channels, 1, 0, rng=rng)

    def windows(self, h, w):
        if h % 8 or w % 8:
            raise ValueError(f"spatial dims must be divisible by 8, got {h}x{w}")
        return [(h // f, w // f) for f in self.FRACTIONS]

    def pyramid_levels(self, x):
        """Max-pooled maps upsampled back to H x W, before channel reduction."""
        return [ops.upsample_nearest(ops.max_pool2d(x, win), win) for win in self.windows(*x.shape[2:])]

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        levels = []
        for win, reduce in zip(self.windows(*x.shape[2:]), self.reduce):
            pooled = reduce(ops.max_pool2d(x, win))
            levels.append(ops.upsample_nearest(pooled, win))
        return self.mix(ops.concat(levels, axis=1))


def make_unit(channels, variant="fractal_resnet", heads=None, ft_depth=DEFAULT_FT_DEPTH, attention=True, rng=None):
    if variant == "fractal_resnet":
        return FracTALResUnit(channels, heads, ft_depth, attention=attention, rng=rng)
    return CEECNetUnit(channels, heads, ft_depth, variant=variant, attention=attention, rng=rng)
