import zlib

import numpy as np
import pytest

from mantis_cd.substrate import (
    Conv2DN,
    DenseN,
    GroupNorm,
    Parameter,
    Tensor,
    conv2d_norm,
    finite_diff_check,
    kernels,
    no_grad,
    norm_groups,
    ops,
)
from mantis_cd.substrate.gradcheck import relative_error


def leaf(rng, shape, lo=-1.0, hi=1.0):
    return Parameter(rng.uniform(lo, hi, size=shape))


def away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return Parameter(x * rng.choice([-1.0, 1.0], size=shape))


def readout(t, rng):
    """Random linear functional so every output coordinate contributes."""
    w = rng.standard_normal(t.shape)
    return ops.sum(t * w)


def conv_oracle(x, w, b, stride, pad, groups):
    bsz, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    og = o // groups
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for u in range(k):
                            for v in range(k):
                                acc += w[oc, ci, u, v] * xp[n, g * cg + ci, i * stride + u, j * stride + v]
                    out[n, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


def bilinear_oracle(x):
    """Half-pixel bilinear x2 with clamped edges, evaluated pixel by pixel."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, 2 * h, 2 * w))
    for i in range(2 * h):
        sy = min(max((i + 0.5) / 2 - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(2 * w):
            sx = min(max((j + 0.5) / 2 - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, i, j] = (
                (1 - fy) * (1 - fx) * x[:, :, y0, x0]
                + (1 - fy) * fx * x[:, :, y0, x1]
                + fy * (1 - fx) * x[:, :, y1, x0]
                + fy * fx * x[:, :, y1, x1]
            )
    return out


# gradcheck harness ---------------------------------------------------------------------

def test_gradcheck_quadratic():
    theta = Parameter(np.array([3.0]))
    report = finite_diff_check(lambda: theta * theta, [theta])
    assert report.passed
    assert theta.grad[0] == pytest.approx(6.0)
    assert report.worst[3] == pytest.approx(6.0, rel=1e-8)


def test_gradcheck_detects_wrong_gradient():
    theta = Parameter(np.array([2.0]))

    def f():
        # forward x^2 with a deliberately wrong backward of 3x
        return Tensor._make(theta.data**2, (theta,), lambda g: (3 * g * theta.data,))

    assert not finite_diff_check(f, [theta]).passed


def test_gradcheck_rejects_nonfinite_and_bad_eps():
    theta = Parameter(np.array([0.0]))
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        finite_diff_check(lambda: ops.log(theta * theta), [theta])
    with pytest.raises(ValueError):
        finite_diff_check(lambda: theta * theta, [theta], eps=0.0)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


# primitive gradients -------------------------------------------------------------------

ELEMENTWISE = {
    "add_broadcast": lambda a, b: a + ops.sum(b, axis=(2, 3), keepdims=True),
    "mul_broadcast_channel": lambda a, b: a * ops.sum(b, axis=1, keepdims=True),
    "div": lambda a, b: a / (b * b + 1.0),
    "sub": lambda a, b: a - b * 2.0,
    "exp": lambda a, b: ops.exp(a),
    "log": lambda a, b: ops.log(a * a + 0.5),
    "relu": lambda a, b: ops.relu(a) * b,
    "sigmoid": lambda a, b: ops.sigmoid(a * 3.0),
    "clip": lambda a, b: ops.clip(a, -2.0, 2.0) * b,
    "softmax_axis1": lambda a, b: ops.softmax(a, axis=1),
    "softmax_axis3": lambda a, b: ops.softmax(a, axis=3),
    "concat": lambda a, b: ops.concat([a, b], axis=1),
    "sum_keepdims": lambda a, b: ops.sum(a * b, axis=(1, 3), keepdims=True),
    "mean": lambda a, b: ops.mean(a, axis=2),
    "reshape": lambda a, b: ops.reshape(a, (2, -1)) * 1.5,
    "take_channel": lambda a, b: ops.take_channel(a, 1) * b,
    "neg": lambda a, b: -a,
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a = away_from_zero(rng, (2, 3, 4, 4))
    b = away_from_zero(rng, (2, 3, 4, 4))
    fn = ELEMENTWISE[name]
    report = finite_diff_check(lambda: readout(fn(a, b), np.random.default_rng(7)), [a, b])
    assert report.passed, report


def test_linear_and_dense_norm_gradients():
    rng = np.random.default_rng(3)
    x = leaf(rng, (5, 6))
    layer = DenseN(6, 8, rng=rng)
    report = finite_diff_check(lambda: readout(layer(x), np.random.default_rng(1)), [x] + layer.parameters())
    assert report.passed, report


@pytest.mark.parametrize("stride,pad,groups,k", [(1, 1, 1, 3), (2, 1, 2, 3), (1, 0, 4, 1), (2, 0, 1, 2)])
def test_conv2d_gradients(stride, pad, groups, k):
    rng = np.random.default_rng(stride * 10 + groups)
    x = leaf(rng, (2, 4, 6, 6))
    w = leaf(rng, (4, 4 // groups, k, k))
    b = leaf(rng, (4,))
    f = lambda: readout(ops.conv2d(x, w, b, stride, pad, groups), np.random.default_rng(2))  # noqa: E731
    assert finite_diff_check(f, [x, w, b]).passed


def test_group_norm_gradients():
    rng = np.random.default_rng(4)
    x = leaf(rng, (2, 8, 3, 3))
    gn = GroupNorm(8)
    gn.gamma.data[:] = rng.uniform(0.5, 1.5, 8)
    f = lambda: readout(gn(x), np.random.default_rng(5))  # noqa: E731
    assert finite_diff_check(f, [x, gn.gamma, gn.beta]).passed


def test_resampling_gradients():
    rng = np.random.default_rng(6)
    x = leaf(rng, (1, 2, 4, 4))
    for fn in (ops.bilinear_resize2d, lambda t: ops.max_pool2d(t, 2), lambda t: ops.upsample_nearest(t, (2, 3))):
        assert finite_diff_check(lambda: readout(fn(x), np.random.default_rng(8)), [x]).passed


def test_max_pool_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 8, 8))
    out = ops.max_pool2d(Tensor(x), (4, 2)).data
    for i in range(2):
        for j in range(4):
            np.testing.assert_array_equal(out[:, :, i, j], x[:, :, 4 * i : 4 * i + 4, 2 * j : 2 * j + 2].max(axis=(2, 3)))


def test_gradient_accumulates_over_reuse():
    x = Parameter(np.array([2.0, -1.0]))
    y = ops.sum(x * x + x * 3.0)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


# forward semantics ---------------------------------------------------------------------

@pytest.mark.parametrize("stride,pad,groups,k", [(1, 1, 1, 3), (2, 1, 2, 3), (1, 0, 2, 1), (3, 2, 1, 3)])
def test_conv2d_matches_nested_loop_oracle(stride, pad, groups, k):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 4, 7, 8))
    w = rng.standard_normal((6, 4 // groups, k, k))
    b = rng.standard_normal(6)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups).data
    np.testing.assert_allclose(out, conv_oracle(x, w, b, stride, pad, groups), atol=1e-6, rtol=0)


def test_conv2d_norm_shapes_and_errors():
    rng = np.random.default_rng(12)
    layer = Conv2DN(8, 5, kernel=3, pad=1, stride=2, rng=rng)
    assert layer(Tensor(rng.standard_normal((1, 8, 16, 16)))).shape == (1, 5, 8, 8)
    with pytest.raises(ValueError):
        Conv2DN(6, 4, groups=4, rng=rng)
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        ops.conv_output_size(2, 5, 0, 1)


def test_conv2d_norm_identity_kernel():
    """1x1 identity weights and an identity-state norm return the input."""
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 8, 5, 5))
    # an input that is already group normalised is a fixed point of the norm
    xg = x.reshape(2, 8, -1)
    x = ((xg - xg.mean(axis=2, keepdims=True)) / np.sqrt(xg.var(axis=2, keepdims=True) + 1e-5)).reshape(x.shape)
    weight = np.eye(8).reshape(8, 8, 1, 1)
    out = conv2d_norm(Tensor(x), Tensor(weight), Tensor(np.ones(8)), Tensor(np.zeros(8)), pad=0)
    np.testing.assert_allclose(out.data, x, atol=1e-5)


def test_norm_group_rule():
    assert [norm_groups(c) for c in (1, 4, 8, 16, 12, 64)] == [1, 1, 8, 8, 4, 8]
    gn = GroupNorm(16)
    x = np.random.default_rng(14).standard_normal((2, 16, 4, 4)) * 3 + 2
    y = gn(Tensor(x)).data.reshape(2, 8, -1)
    np.testing.assert_allclose(y.mean(axis=2), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=2), 1, atol=1e-4)


def test_bilinear_examples():
    const = np.full((1, 2, 3, 5), 0.7)
    np.testing.assert_allclose(ops.bilinear_resize2d(Tensor(const)).data, 0.7, atol=1e-15)
    single = np.array([[[[4.2]]]])
    np.testing.assert_array_equal(ops.bilinear_resize2d(Tensor(single)).data, np.full((1, 1, 2, 2), 4.2))
    x = np.array([[[[0.0, 1.0], [0.0, 1.0]]]])
    expected_row = [0.0, 0.25, 0.75, 1.0]
    np.testing.assert_allclose(ops.bilinear_resize2d(Tensor(x)).data[0, 0], [expected_row] * 4)
    with pytest.raises(ValueError):
        ops.bilinear_resize2d(Tensor(np.zeros((1, 1, 0, 3))))


def test_bilinear_matches_pixel_oracle():
    x = np.random.default_rng(15).standard_normal((2, 3, 5, 4))
    np.testing.assert_allclose(ops.bilinear_resize2d(Tensor(x)).data, bilinear_oracle(x), atol=1e-13)


def test_bilinear_backward_is_adjoint():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((1, 2, 3, 6))
    g = rng.standard_normal((1, 2, 6, 12))
    lhs = (kernels.upsample2x(x) * g).sum()
    rhs = (x * kernels.upsample2x_backward(g)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_broadcasting_contract():
    rng = np.random.default_rng(17)
    full = Tensor(rng.standard_normal((2, 3, 4, 5)))
    per_channel = Tensor(rng.standard_normal((2, 3, 1, 1)))
    per_pixel = Tensor(rng.standard_normal((2, 1, 4, 5)))
    assert (per_channel * full).shape == (2, 3, 4, 5)
    assert (full * per_pixel).shape == (2, 3, 4, 5)
    np.testing.assert_array_equal((per_channel * full).data, per_channel.data * full.data)


def test_determinism_same_seed():
    x = Tensor(np.random.default_rng(18).standard_normal((1, 8, 8, 8)))
    a = Conv2DN(8, 8, rng=5)(x).data
    b = Conv2DN(8, 8, rng=5)(x).data
    assert np.array_equal(a, b)


def test_parameter_zero_grad_and_no_grad():
    p = Parameter(np.ones(3))
    ops.sum(p * 2.0).backward()
    before = p.data.copy()
    p.zero_grad()
    assert p.grad is None or not p.grad.any()
    np.testing.assert_array_equal(p.data, before)
    with no_grad():
        out = p * 3.0
    assert not out.requires_grad


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(19)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)) * 50)
    for out in (ops.sigmoid(x), ops.softmax(x, 1), GroupNorm(4)(x), ops.exp(ops.clip(x, -30, 30))):
        assert np.all(np.isfinite(out.data))


# kernel backends -----------------------------------------------------------------------

@pytest.mark.skipif(kernels.compiled_kernels is None, reason="compiled extension not built")
def test_backends_agree():
    py, cy = kernels.python_kernels, kernels.compiled_kernels
    rng = np.random.default_rng(20)
    xp = rng.standard_normal((2, 3, 9, 8))
    for k, s in ((3, 1), (3, 2), (1, 1), (2, 2)):
        ho, wo = (9 - k) // s + 1, (8 - k) // s + 1
        a = py.im2col(xp, k, s, ho, wo)
        np.testing.assert_array_equal(a, cy.im2col(xp, k, s, ho, wo))
        g = rng.standard_normal(a.shape)
        np.testing.assert_allclose(py.col2im(g, 2, 3, 9, 8, k, s, ho, wo), cy.col2im(g, 2, 3, 9, 8, k, s, ho, wo),
                                   atol=1e-12)
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(py.upsample2x(x), cy.upsample2x(x), atol=1e-14)
    g = rng.standard_normal((2, 3, 8, 10))
    np.testing.assert_allclose(py.upsample2x_backward(g), cy.upsample2x_backward(g), atol=1e-13)


def test_use_backend_switches_ops():
    rng = np.random.default_rng(21)
    x, w = Tensor(rng.standard_normal((1, 2, 5, 5))), Tensor(rng.standard_normal((3, 2, 3, 3)))
    original = kernels.BACKEND
    try:
        kernels.use_backend("python")
        assert kernels.BACKEND == "python"
        ref = ops.conv2d(x, w, pad=1).data
        if kernels.compiled_kernels is not None:
            kernels.use_backend("cython")
            np.testing.assert_allclose(ops.conv2d(x, w, pad=1).data, ref, atol=1e-12)
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(original)
