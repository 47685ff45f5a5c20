"""FracTAL attention and the self / relative attention fusions.

Queries, keys and values are sigmoid-activated grouped ``Conv2DN``
projections.  The spatial similarity reduces over H, W (one value per
channel, B x C x 1 x 1) and the channel similarity over C (one value per
pixel, B x 1 x H x W); neither ever materialises a C x C or HW x HW map.
"""
import numpy as np

from .ftnmt import DEFAULT_SMOOTH, FTConfig, ftnmt_avg, tanimoto_d
from .substrate import ops
from .substrate.nn import Conv2DN, GroupNorm, Module, _rng
from .substrate.tensor import Parameter

DEFAULT_FT_DEPTH = 5


def spatial_similarity(q, k, depth=DEFAULT_FT_DEPTH, averaged=False, smooth=DEFAULT_SMOOTH):
    """Per-channel similarity over the spatial axes -> B x C x 1 x 1.

    ``averaged=False`` gives the plain fractal Tanimoto T^d; ``averaged=True``
    the complemented depth average used inside the attention layer.
    """
    cfg = FTConfig(depth, (2, 3), smooth)
    return ftnmt_avg(q, k, cfg) if averaged else tanimoto_d(q, k, cfg)


def channel_similarity(q, k, depth=DEFAULT_FT_DEPTH, averaged=False, smooth=DEFAULT_SMOOTH):
    """Per-pixel similarity over the channel axis -> B x 1 x H x W."""
    cfg = FTConfig(depth, (1,), smooth)
    return ftnmt_avg(q, k, cfg) if averaged else tanimoto_d(q, k, cfg)


def zero_gamma():
    return Parameter(np.zeros(1))


class FracTALAttention(Module):
    def __init__(self, channels, heads=1, ft_depth=DEFAULT_FT_DEPTH, rng=None):
        if channels % heads:
            raise ValueError(f"heads={heads} must divide channels={channels}")
        rng = _rng(rng)
        self.channels, self.heads, self.ft_depth = channels, heads, ft_depth
        self.query = Conv2DN(channels, channels, 3, 1, 1, groups=heads, rng=rng)
        self.key = Conv2DN(channels, channels, 3, 1, 1, groups=heads, rng=rng)
        self.value = Conv2DN(channels, channels, 3, 1, 1, groups=heads, rng=rng)
        self.norm = GroupNorm(channels)

    def project(self, qin, kin, vin):
        for t in (qin, kin, vin):
            if t.shape[1] != self.channels:
                raise ValueError(f"expected {self.channels} channels, got {t.shape[1]}")
        if not qin.shape == kin.shape == vin.shape:
            raise ValueError("query, key and value inputs must share a shape")
        return ops.sigmoid(self.query(qin)), ops.sigmoid(self.key(kin)), ops.sigmoid(self.value(vin))

    def attend(self, q, k, v):
        """Similarity-weighted values before the trailing normalisation."""
        spat = spatial_similarity(q, k, self.ft_depth, averaged=True)
        chan = channel_similarity(q, k, self.ft_depth, averaged=True)
        return (spat * v + chan * v) * 0.5

    def forward(self, qin, kin, vin):
        q, k, v = self.project(qin, kin, vin)
        return self.norm(self.attend(q, k, v))


def fractal_attention(layer, qin, kin, vin):
    return layer(qin, kin, vin)


def self_fusion(L, A, gamma):
    """Emphasise ``L`` by its attention map: L * (1 + gamma * A)."""
    if L.shape != A.shape:
        raise ValueError(f"shape mismatch: {L.shape} vs {A.shape}")
    return L * (gamma * A + 1.0)


class Fusion(Module):
    """Relative attention fusion of two equally shaped layers.

    F1 = L1 * (1 + g1 * Att(q(L1), k(L2), v(L2))), F2 symmetric with g2, and
    the output is a grouped ``Conv2DN`` over concat(F1, F2).  With
    ``attention=False`` the attention branches are skipped entirely, which
    equals the gamma = 0 state exactly.
    """

    def __init__(self, channels, heads=1, ft_depth=DEFAULT_FT_DEPTH, attention=True, rng=None):
        rng = _rng(rng)
        self.channels = channels
        self.attention = attention
        self.fuse = Conv2DN(2 * channels, channels, 3, 1, 1, groups=heads, rng=rng)
        self.att12 = FracTALAttention(channels, heads, ft_depth, rng=rng)
        self.att21 = FracTALAttention(channels, heads, ft_depth, rng=rng)
        self.gamma1 = zero_gamma()
        self.gamma2 = zero_gamma()

    def emphasise(self, L1, L2):
        if L1.shape != L2.shape:
            raise ValueError(f"shape mismatch: {L1.shape} vs {L2.shape}")
        if not self.attention:
            return L1, L2
        F1 = self_fusion(L1, self.att12(L1, L2, L2), self.gamma1)
        F2 = self_fusion(L2, self.att21(L2, L1, L1), self.gamma2)
        return F1, F2

    def forward(self, L1, L2):
        F1, F2 = self.emphasise(L1, L2)
        return self.fuse(ops.concat([F1, F2], axis=1))


def relative_fusion(L1, L2, state):
    return state(L1, L2)
