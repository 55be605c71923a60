import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irs_cdrn.nn import (
    AdamState, BatchNormLayer, ConvLayer, ShapeError, adam_step, batchnorm_backward,
    batchnorm_forward, conv2d_backward, conv2d_forward, finite_difference_check, relu_backward,
    relu_forward,
)

GRAD_TOL = 1e-5


def identity_conv(ch):
    w = np.zeros((ch, 3, 3, ch))
    for c in range(ch):
        w[c, 1, 1, c] = 1.0
    return ConvLayer(weight=w, bias=np.zeros(ch))


def _param_check(fn_of_param, param, grad, **kw):
    """Finite-difference check on an array that ``fn_of_param`` reads in place."""
    def f(point):
        saved = param.copy()
        param[...] = point
        try:
            return fn_of_param()
        finally:
            param[...] = saved
    return finite_difference_check(f, param.copy(), grad, **kw)


# --------------------------------------------------------------------------- conv

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 4, 5, 3))
    np.testing.assert_array_equal(conv2d_forward(x, identity_conv(3)), x)


def test_conv_all_ones_kernel_window_sums():
    c = 1.7
    x = np.full((5, 5, 1), c)
    layer = ConvLayer(weight=np.ones((1, 3, 3, 1)), bias=np.zeros(1))
    y = conv2d_forward(x, layer)[..., 0]
    assert y.shape == (5, 5)
    assert y[2, 2] == pytest.approx(9 * c)
    assert y[0, 0] == pytest.approx(4 * c) and y[4, 4] == pytest.approx(4 * c)
    assert y[0, 2] == pytest.approx(6 * c) and y[2, 4] == pytest.approx(6 * c)


def test_conv_zero_weights_bias_only():
    layer = ConvLayer(weight=np.zeros((4, 3, 3, 2)), bias=np.full(4, 0.25))
    y = conv2d_forward(np.random.default_rng(1).standard_normal((3, 3, 2)), layer)
    np.testing.assert_array_equal(y, 0.25)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((2, 2, 3)), identity_conv(2))


def test_conv_against_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 5, 3))
    layer = ConvLayer.init(3, 2, rng)
    layer.bias[:] = rng.standard_normal(2)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 4, 5, 2))
    for b in range(2):
        for i in range(4):
            for j in range(5):
                for o in range(2):
                    ref[b, i, j, o] = np.sum(xp[b, i:i + 3, j:j + 3, :] * layer.weight[o]) + layer.bias[o]
    np.testing.assert_allclose(conv2d_forward(x, layer), ref, atol=1e-12)


def test_conv_backward_bias_and_identity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 4, 2))
    g = rng.standard_normal((2, 3, 4, 2))
    gx, _, gb = conv2d_backward(x, identity_conv(2), g)
    np.testing.assert_allclose(gx, g, atol=1e-15)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 1, 2)))


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 4, 2))
    layer = ConvLayer.init(2, 3, rng)
    layer.bias[:] = rng.standard_normal(3)
    R = rng.standard_normal((2, 4, 4, 3))
    gx, gw, gb = conv2d_backward(x, layer, R)
    loss = lambda xx: float(np.sum(conv2d_forward(xx, layer) * R))
    assert finite_difference_check(loss, x, gx) < GRAD_TOL
    assert _param_check(lambda: loss(x), layer.weight, gw) < GRAD_TOL
    assert _param_check(lambda: loss(x), layer.bias, gb) < GRAD_TOL


def test_conv_backward_shape_mismatch():
    with pytest.raises(ShapeError):
        conv2d_backward(np.zeros((1, 3, 3, 2)), identity_conv(2), np.zeros((1, 3, 3, 3)))


# --------------------------------------------------------------------------- batch norm

def test_batchnorm_train_statistics():
    rng = np.random.default_rng(5)
    x = 3.0 + 2.0 * rng.standard_normal((16, 4, 5, 3))
    y, _ = batchnorm_forward(x, BatchNormLayer.init(3), "train")
    assert np.max(np.abs(y.mean(axis=(0, 1, 2)))) < 1e-6
    assert np.max(np.abs(y.var(axis=(0, 1, 2)) - 1)) < 1e-3


def test_batchnorm_constant_channel():
    layer = BatchNormLayer.init(2)
    layer.shift[:] = [0.5, -1.0]
    y, _ = batchnorm_forward(np.full((4, 2, 2, 2), 7.0), layer, "train")
    np.testing.assert_allclose(y[..., 0], 0.5)
    np.testing.assert_allclose(y[..., 1], -1.0)


def test_batchnorm_eval_is_affine():
    rng = np.random.default_rng(6)
    layer = BatchNormLayer.init(2)
    layer.gain[:] = [2.0, 0.5]
    layer.shift[:] = [1.0, -1.0]
    layer.running_mean[:] = [0.3, -0.2]
    layer.running_var[:] = [4.0, 0.25]
    x = rng.standard_normal((3, 2, 2, 2))
    y, cache = batchnorm_forward(x, layer, "eval")
    assert cache is None
    for c in range(2):
        a = layer.gain[c] / np.sqrt(layer.running_var[c] + layer.eps)
        b = layer.shift[c] - a * layer.running_mean[c]
        np.testing.assert_allclose(y[..., c], a * x[..., c] + b, atol=1e-14)


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(7).standard_normal((4, 3, 3, 1)) * 3 + 1
    layer = BatchNormLayer.init(1, momentum=0.9)
    batchnorm_forward(x, layer, "train")
    n = x.size
    assert layer.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert layer.running_var[0] == pytest.approx(0.9 + 0.1 * x.var() * n / (n - 1))


def test_batchnorm_single_value_rejected():
    with pytest.raises(ShapeError):
        batchnorm_forward(np.zeros((1, 1, 1, 2)), BatchNormLayer.init(2), "train")


def test_batchnorm_backward_needs_cache():
    with pytest.raises(ValueError):
        batchnorm_backward(None, BatchNormLayer.init(2), np.zeros((1, 2, 2, 2)), None)


def test_batchnorm_backward_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 3, 3, 2))
    layer = BatchNormLayer.init(2)
    layer.gain[:] = rng.standard_normal(2)
    layer.shift[:] = rng.standard_normal(2)
    R = rng.standard_normal(x.shape)
    _, cache = batchnorm_forward(x, layer, "train")
    gx, gg, gs = batchnorm_backward(x, layer, R, cache)
    np.testing.assert_allclose(gs, R.sum(axis=(0, 1, 2)))
    loss = lambda xx: float(np.sum(batchnorm_forward(xx, layer, "train")[0] * R))
    assert finite_difference_check(loss, x, gx) < GRAD_TOL
    assert _param_check(lambda: loss(x), layer.gain, gg) < GRAD_TOL
    assert _param_check(lambda: loss(x), layer.shift, gs) < GRAD_TOL


def test_batchnorm_uniform_grad_has_no_mean_component():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 3, 3, 2))
    layer = BatchNormLayer.init(2)
    _, cache = batchnorm_forward(x, layer, "train")
    gx, _, _ = batchnorm_backward(x, layer, np.ones_like(x), cache)
    assert np.max(np.abs(gx.sum(axis=(0, 1, 2)))) < 1e-10
    assert np.max(np.abs(gx)) < 1e-10


# --------------------------------------------------------------------------- relu

def test_relu_cases():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu_forward(x), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(x, np.full(3, 5.0)), [0, 0, 5])
    pos = np.abs(np.random.default_rng(10).standard_normal(5)) + 0.1
    np.testing.assert_array_equal(relu_forward(pos), pos)
    np.testing.assert_array_equal(relu_backward(pos, pos), pos)


def test_relu_finite_differences_away_from_kink():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4, 4, 2))
    R = rng.standard_normal(x.shape)
    g = relu_backward(x, R)
    err = finite_difference_check(lambda xx: float(np.sum(relu_forward(xx) * R)), x, g,
                                  step=1e-6, mask=np.abs(x) > 1e-3)
    assert err < 1e-6


# --------------------------------------------------------------------------- gradient checker

def test_fd_check_linear_and_quadratic():
    rng = np.random.default_rng(12)
    a = rng.standard_normal(7)
    x = rng.standard_normal(7)
    assert finite_difference_check(lambda v: float(a @ v), x, a) < 1e-7
    Q = rng.standard_normal((7, 7))
    Q = Q + Q.T
    assert finite_difference_check(lambda v: float(v @ Q @ v) / 2, x, Q @ x, step=1e-5) < 1e-7


def test_fd_check_detects_wrong_gradient():
    x = np.ones(3)
    assert finite_difference_check(lambda v: float(v @ v), x, np.zeros(3)) > 0.5


def test_fd_check_composed_stack():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 4, 2))
    conv = ConvLayer.init(2, 4, rng)
    bn = BatchNormLayer.init(4)
    R = rng.standard_normal((2, 3, 4, 4))

    def loss(xx):
        z = conv2d_forward(xx, conv)
        y, _ = batchnorm_forward(z, bn, "train")
        return float(np.sum(relu_forward(y) * R))

    z = conv2d_forward(x, conv)
    y, cache = batchnorm_forward(z, bn, "train")
    g = relu_backward(y, R)
    g, _, _ = batchnorm_backward(z, bn, g, cache)
    gx, _, _ = conv2d_backward(x, conv, g)
    assert finite_difference_check(loss, x, gx) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
       st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_conv_backward_property(b, h, w, cin, cout, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, h, w, cin))
    layer = ConvLayer.init(cin, cout, rng)
    R = rng.standard_normal((b, h, w, cout))
    y = conv2d_forward(x, layer)
    assert y.shape[:3] == x.shape[:3]
    gx, gw, _ = conv2d_backward(x, layer, R)
    loss = lambda xx: float(np.sum(conv2d_forward(xx, layer) * R))
    assert finite_difference_check(loss, x, gx, floor=1e-6) < 1e-4
    assert _param_check(lambda: loss(x), layer.weight, gw, floor=1e-6) < 1e-4


# --------------------------------------------------------------------------- adam

def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    state = AdamState()
    adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert state.step == 1


def test_adam_constant_gradient_moves_at_learning_rate():
    p = [np.array([0.0, 0.0])]
    state = AdamState(lr=0.01)
    g = [np.array([3.0, -0.5])]
    prev = p[0].copy()
    for _ in range(200):
        adam_step(p, g, state)
        step = p[0] - prev
        prev = p[0].copy()
    np.testing.assert_allclose(step, [-0.01, 0.01], rtol=1e-6)
    assert state.step == 200


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(14)
        p = [rng.standard_normal(4)]
        st_ = AdamState()
        for _ in range(10):
            adam_step(p, [rng.standard_normal(4)], st_)
        return p[0]
    assert run().tobytes() == run().tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState())
