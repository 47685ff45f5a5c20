"""Central finite-difference verification of analytic gradients."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: tuple = None  # (param index, flat coordinate, analytic, numeric)
    per_param: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}, {self.n_checked} coords)"


def relative_error(analytic, numeric, atol=1e-6):
    """|a - n| / max(|a|, |n|, atol); ``atol`` keeps vanishing gradients from dividing by ~0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)


def _scalar(f):
    with no_grad():
        val = f()
    v = float(np.asarray(val.data if hasattr(val, "data") else val).reshape(-1)[0])
    if not np.isfinite(v):
        raise FloatingPointError("function is not finite at a perturbation point")
    return v


def finite_diff_check(f, params, eps=1e-6, tol=1e-4, max_coords=None, rng=None, atol=1e-6):
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``params`` is a list of Parameters (or leaf Tensors with ``requires_grad``).
    With ``max_coords`` set, that many coordinates per parameter are sampled
    instead of checking every one.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("function is not finite at the base point")
    out.backward()
    rng = np.random.default_rng(0) if rng is None else rng

    worst_err, worst, n_checked, per_param = 0.0, None, 0, []
    for pi, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        perr = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f)
            flat[i] = orig - eps
            fm = _scalar(f)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = relative_error(a, numeric, atol)
            n_checked += 1
            perr = max(perr, err)
            if worst is None or err > worst_err:
                worst_err, worst = err, (pi, int(i), a, numeric)
        per_param.append(perr)
    return GradCheckReport(worst_err, tol, n_checked, worst, per_param)
