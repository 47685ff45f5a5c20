"""Finite-difference gradient suite over every differentiable building block.

Each check returns ``(name, GradCheckReport)``.  Gammas that start at zero
are moved to random nonzero values first, otherwise the attention branches
would receive no gradient and their checks would be vacuous.
"""
import numpy as np

from .attention import FracTALAttention, Fusion, self_fusion
from .blocks import CEECNetUnit, FracTALResUnit
from .ftnmt import ftnmt_loss
from .mantis import Mantis, MantisConfig, crisp_sigmoid
from .substrate import finite_diff_check, ops
from .substrate.tensor import Parameter
from .trainer import multitask_loss

COMPONENT_TOL = 1e-4
NETWORK_TOL = 1e-3


def _leaf(rng, shape, lo=0.05, hi=0.95):
    return Parameter(rng.uniform(lo, hi, size=shape))


def _wake_gammas(module, rng, value_range=(0.3, 0.8)):
    for name, p in module.named_parameters():
        if name.rsplit(".", 1)[-1].startswith("gamma") and p.size == 1 and "norm" not in name:
            p.data[...] = rng.uniform(*value_range)


def _weighted(x, w):
    """A generic scalar readout sum(x * w)."""
    return ops.sum(x * w)


def check_ftnmt_loss(rng, depth=3):
    p = _leaf(rng, (2, 2, 4, 4))
    target = rng.uniform(0, 1, size=p.shape)
    return finite_diff_check(lambda: ftnmt_loss(p, target, depth), [p], tol=COMPONENT_TOL)


def check_fractal_attention(rng):
    layer = FracTALAttention(8, heads=2, ft_depth=5, rng=rng)
    q, k, v = (_leaf(rng, (1, 8, 4, 4)) for _ in range(3))
    w = rng.standard_normal((1, 8, 4, 4))
    params = [q, k, v] + layer.parameters()
    return finite_diff_check(lambda: _weighted(layer(q, k, v), w), params, tol=COMPONENT_TOL, max_coords=6, rng=rng)


def check_self_fusion(rng):
    L, A = _leaf(rng, (1, 4, 3, 3)), _leaf(rng, (1, 4, 3, 3))
    gamma = Parameter(np.array([0.6]))
    w = rng.standard_normal(L.shape)
    return finite_diff_check(lambda: _weighted(self_fusion(L, A, gamma), w), [L, A, gamma], tol=COMPONENT_TOL)


def check_relative_fusion(rng):
    layer = Fusion(8, heads=1, ft_depth=5, rng=rng)
    _wake_gammas(layer, rng)
    L1, L2 = _leaf(rng, (1, 8, 4, 4)), _leaf(rng, (1, 8, 4, 4))
    w = rng.standard_normal(L1.shape)
    params = [L1, L2] + layer.parameters()
    return finite_diff_check(lambda: _weighted(layer(L1, L2), w), params, tol=COMPONENT_TOL, max_coords=4, rng=rng)


def check_crisp_sigmoid(rng):
    x = Parameter(rng.standard_normal((2, 1, 3, 3)))
    gamma = Parameter(np.array([0.4]), constraint=(1e-2, 1.0))
    w = rng.standard_normal(x.shape)
    return finite_diff_check(lambda: _weighted(crisp_sigmoid(x, gamma), w), [x, gamma], tol=COMPONENT_TOL)


def _check_unit(unit, rng, size=8):
    _wake_gammas(unit, rng)
    x = _leaf(rng, (1, unit.channels, size, size), -1.0, 1.0)
    w = rng.standard_normal(x.shape)
    params = [x] + unit.parameters()
    return finite_diff_check(lambda: _weighted(unit(x), w), params, tol=COMPONENT_TOL, max_coords=3, rng=rng)


def check_fractal_resnet_unit(rng):
    return _check_unit(FracTALResUnit(8, heads=1, rng=rng), rng)


def check_ceecnet_v1_unit(rng):
    return _check_unit(CEECNetUnit(8, heads=1, variant="ceecnet_v1", rng=rng), rng)


def check_ceecnet_v2_unit(rng):
    return _check_unit(CEECNetUnit(8, heads=1, variant="ceecnet_v2", rng=rng), rng)


def check_full_network(rng, n_params=24, depth=5):
    """D4 nf8 mantis, multitask loss, one coordinate in each of ``n_params`` sampled tensors."""
    model = Mantis(MantisConfig(depth=4, nf=8, ft_depth=5, seed=int(rng.integers(1 << 30))))
    _wake_gammas(model, rng)
    model.head.gamma_sigmoid.data[...] = 0.7
    size = model.cfg.min_size()
    x1, x2 = rng.uniform(0, 1, (2, 1, 3, size, size))
    mask = (rng.uniform(size=(1, 1, size, size)) > 0.7).astype(float)
    targets = {
        "segmentation": np.concatenate([1 - mask, mask], axis=1),
        "boundary": (rng.uniform(size=mask.shape) > 0.9).astype(float),
        "distance": rng.uniform(size=mask.shape) * mask,
    }
    params = model.parameters()
    chosen = [params[i] for i in sorted(rng.choice(len(params), size=min(n_params, len(params)), replace=False))]
    return finite_diff_check(lambda: multitask_loss(model(x1, x2), targets, depth), chosen,
                             tol=NETWORK_TOL, max_coords=1, rng=rng)


COMPONENT_CHECKS = {
    "ftnmt_loss": check_ftnmt_loss,
    "fractal_attention": check_fractal_attention,
    "self_fusion": check_self_fusion,
    "relative_fusion": check_relative_fusion,
    "crisp_sigmoid": check_crisp_sigmoid,
    "fractal_resnet_unit": check_fractal_resnet_unit,
    "ceecnet_v1_unit": check_ceecnet_v1_unit,
    "ceecnet_v2_unit": check_ceecnet_v2_unit,
}


def run_suite(seed=0, full_network=True, names=None):
    """Run the checks in order; returns a list of (name, report)."""
    checks = dict(COMPONENT_CHECKS)
    if full_network:
        checks["mantis_d4nf8"] = check_full_network
    if names is not None:
        unknown = set(names) - set(checks)
        if unknown:
            raise KeyError(f"unknown checks: {sorted(unknown)}")
        checks = {k: v for k, v in checks.items() if k in names}
    results = []
    for i, (name, fn) in enumerate(checks.items()):
        results.append((name, fn(np.random.default_rng([seed, i]))))
    return results
