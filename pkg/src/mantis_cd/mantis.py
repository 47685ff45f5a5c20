"""The mantis dual-encoder / single-decoder change detection network.

Both dates go through one shared encoder.  At every depth but the deepest
the pair is merged by relative attention :class:`Fusion` into a skip layer;
the deepest pair is concatenated, mixed and pyramid pooled.  The decoder
upsamples, concatenates the fused skip, mixes with a Conv2DN and applies a
unit.  A conditioned multitask head predicts distance transform, then
boundaries, then the change segmentation, each reusing the previous.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .attention import DEFAULT_FT_DEPTH, Fusion
from .blocks import VARIANTS, DownscaleTransition, PSPPooling, heads_for, make_unit
from .substrate import ops
from .substrate.nn import Conv2d, Conv2DN, Module, _rng
from .substrate.tensor import Parameter, Tensor

SIGMOID_EPS = 1e-2


@dataclass
class MantisConfig:
    depth: int = 4
    nf: int = 8
    variant: str = "fractal_resnet"
    ft_depth: float = DEFAULT_FT_DEPTH
    heads_rule: str = "nf/8"
    num_classes: int = 2
    in_channels: int = 3
    attention: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.heads_rule != "nf/8":
            raise ValueError("only the 'nf/8' heads rule is supported")

    def channels(self, level):
        return self.nf * 2**level

    def heads(self, level):
        return heads_for(self.channels(level))

    def min_size(self):
        """Smallest valid input side: the bottleneck must be divisible by 8."""
        return 8 * 2 ** (self.depth - 1)

    def check_input(self, h, w):
        step = self.min_size()
        if h % step or w % step:
            raise ValueError(f"input {h}x{w} must be divisible by {step} for depth {self.depth}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def crisp_sigmoid(x, gamma, eps=SIGMOID_EPS):
    """sigmoid(x / gamma) with gamma clamped into [eps, 1]."""
    g = ops.clip(gamma, eps, 1.0)
    return ops.sigmoid(x / g)


class _TaskBranch(Module):
    """Two Conv2DN + ReLU layers followed by a 1x1 prediction conv."""

    def __init__(self, in_channels, nf, out_channels, rng):
        self.conv1 = Conv2DN(in_channels, nf, 3, 1, rng=rng)
        self.conv2 = Conv2DN(nf, nf, 3, 1, rng=rng)
        self.logits = Conv2d(nf, out_channels, 1, 0, rng=rng)

    def forward(self, x):
        return self.logits(ops.relu(self.conv2(ops.relu(self.conv1(x)))))


class SegmentationHead(Module):
    def __init__(self, nf, num_classes=2, rng=None):
        rng = _rng(rng)
        self.nf = nf
        self.distance = _TaskBranch(2 * nf, nf, 1, rng)
        # 3x3 rather than 1x1: with one input channel per norm group a 1x1 weight would cancel out
        self.balance_distance = Conv2DN(1, nf, 3, 1, rng=rng)
        self.boundary = _TaskBranch(3 * nf, nf, 1, rng)
        self.balance_boundary = Conv2DN(1, nf, 3, 1, rng=rng)
        self.segmentation = _TaskBranch(4 * nf, nf, num_classes, rng)
        self.gamma_sigmoid = Parameter(np.ones(1), constraint=(SIGMOID_EPS, 1.0))

    def forward(self, final_features, first_fused):
        feats = ops.concat([final_features, first_fused], axis=1)
        distance = ops.sigmoid(self.distance(feats))
        bal_d = self.balance_distance(distance)
        boundary = crisp_sigmoid(self.boundary(ops.concat([feats, bal_d], axis=1)), self.gamma_sigmoid)
        bal_b = self.balance_boundary(boundary)
        logits = self.segmentation(ops.concat([feats, bal_d, bal_b], axis=1))
        return {"distance": distance, "boundary": boundary, "segmentation": ops.softmax(logits, axis=1)}


class Mantis(Module):
    def __init__(self, cfg=None, **overrides):
        cfg = cfg or MantisConfig(**overrides)
        self.cfg = cfg
        rng = _rng(cfg.seed)
        D = cfg.depth
        unit = lambda level: make_unit(  # noqa: E731
            cfg.channels(level), cfg.variant, cfg.heads(level), cfg.ft_depth, cfg.attention, rng
        )
        self.stem = Conv2DN(cfg.in_channels, cfg.nf, 3, 1, rng=rng)
        self.downs = [DownscaleTransition(cfg.channels(i - 1), cfg.channels(i), rng=rng) for i in range(1, D)]
        self.encoder = [unit(i) for i in range(D)]
        self.fusions = [
            Fusion(cfg.channels(i), cfg.heads(i), cfg.ft_depth, attention=cfg.attention, rng=rng)
            for i in range(D - 1)
        ]
        top = cfg.channels(D - 1)
        self.middle = Conv2DN(2 * top, top, 3, 1, rng=rng)
        self.psp = PSPPooling(top, rng=rng)
        self.combine = {
            i: Conv2DN(cfg.channels(i + 1) + cfg.channels(i), cfg.channels(i), 3, 1, rng=rng) for i in range(D - 1)
        }
        self.decoder = {i: unit(i) for i in range(D - 1)}
        self.head = SegmentationHead(cfg.nf, cfg.num_classes, rng=rng)
        self.shape_log = None

    def _log(self, name, t):
        if self.shape_log is not None:
            self.shape_log.append((name, tuple(t.shape)))

    def encode(self, img):
        """Per-depth outputs of one encoder branch."""
        outs = []
        x = self.stem(img)
        for i, unit in enumerate(self.encoder):
            if i:
                x = self.downs[i - 1](x)
            x = unit(x)
            outs.append(x)
        return outs

    def features(self, img1, img2, return_branches=False):
        img1 = img1 if isinstance(img1, Tensor) else Tensor(np.asarray(img1, dtype=np.float64))
        img2 = img2 if isinstance(img2, Tensor) else Tensor(np.asarray(img2, dtype=np.float64))
        if img1.shape != img2.shape:
            raise ValueError(f"input shapes differ: {img1.shape} vs {img2.shape}")
        b, c, h, w = img1.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {c}")
        self.cfg.check_input(h, w)
        cfg, D = self.cfg, self.cfg.depth

        e1, e2 = self.encode(img1), self.encode(img2)
        for i, (a, bb) in enumerate(zip(e1, e2)):
            assert a.shape == (b, cfg.channels(i), h >> i, w >> i)
            self._log(f"enc{i}", a)
        skips = [fuse(e1[i], e2[i]) for i, fuse in enumerate(self.fusions)]
        for i, s in enumerate(skips):
            assert s.shape == e1[i].shape
            self._log(f"fused{i}", s)

        x = self.psp(self.middle(ops.concat([e1[-1], e2[-1]], axis=1)))
        assert x.shape == e1[-1].shape
        self._log("psp", x)
        for i in range(D - 2, -1, -1):
            x = ops.bilinear_resize2d(x)
            x = self.combine[i](ops.concat([x, skips[i]], axis=1))
            x = self.decoder[i](x)
            assert x.shape == skips[i].shape
            self._log(f"dec{i}", x)
        if return_branches:
            return x, skips[0], (e1, e2)
        return x, skips[0]

    def forward(self, img1, img2):
        final, first_fused = self.features(img1, img2)
        return self.head(final, first_fused)

    def predict(self, img1, img2):
        """Change-class probability, B x H x W (no graph recorded)."""
        from .substrate.tensor import no_grad

        with no_grad():
            out = self.forward(img1, img2)
        return out["segmentation"].data[:, 1]

    def set_shape_log(self, log):
        self.shape_log = log
        for unit in list(self.encoder) + list(self.decoder.values()):
            if hasattr(unit, "shape_log"):
                unit.shape_log = log


def feature_entropy(features, bins=256):
    """Shannon entropy (bits) of feature values rescaled to [-1, 1]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty feature tensor")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return 0.0
    x = 2.0 * (x - lo) / (hi - lo) - 1.0
    counts, _ = np.histogram(x, bins=bins, range=(-1.0, 1.0))
    p = counts[counts > 0] / x.size
    return float(-(p * np.log2(p)).sum() + 0.0)
