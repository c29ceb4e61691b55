import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from guidedrep.autodiff import (EPS_CLIP, Conv2D, Dense, Dropout, Flatten, GlobalAvgPool, NesterovSGD, ReLU,
                                Sequential, Sigmoid, Tensor, cce_loss, central_difference, glorot_uniform,
                                mse_loss, relative_error, sigmoid, wbce_loss)

TRIALS = 100
TOL = 1e-4


def _layer_errors(layer, x, rng, training=False):
    """FD check of a layer's input and parameter gradients via a random projection."""
    out = layer.forward(x, training=training, rng=rng)
    r = np.random.default_rng(0).normal(size=out.shape)
    in_grad = layer.backward(r)
    analytic = [p.grad.copy() for p in layer.params()]

    def scalar():
        return float(np.sum(layer.forward(x, training=training, rng=rng) * r))

    x_t = Tensor(x)

    def scalar_x():
        return float(np.sum(layer.forward(x_t.values, training=training, rng=rng) * r))

    errs = [relative_error(in_grad, central_difference(scalar_x, x_t))]
    for p, g in zip(layer.params(), analytic):
        errs.append(relative_error(g, central_difference(scalar, p)))
    return max(errs)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-12), x)


def test_dense_fd_100_trials():
    worst = 0.0
    for t in range(TRIALS):
        rng = np.random.default_rng(t)
        fan_in, fan_out = rng.integers(1, 6, size=2)
        layer = Dense(int(fan_in), int(fan_out), rng, l2=float(rng.choice([0.0, 0.01])))
        layer.bias.values[...] = rng.normal(size=layer.bias.shape)
        x = rng.normal(size=(int(rng.integers(1, 5)), int(fan_in)))
        out = layer.forward(x)
        r = rng.normal(size=out.shape)
        layer.backward(r)

        def fn():
            return float(np.sum(layer.forward(x) * r)) + layer.l2_penalty()

        worst = max(worst, relative_error(layer.weight.grad, central_difference(fn, layer.weight)),
                    relative_error(layer.bias.grad, central_difference(fn, layer.bias)))
    assert worst < TOL


@pytest.mark.parametrize("stride,kernel", [(1, 3), (2, 3), (1, 1), (2, 5)])
def test_conv2d_fd_100_trials(stride, kernel):
    worst = 0.0
    for t in range(TRIALS // 4):
        rng = np.random.default_rng(100 + t)
        c_in, c_out = rng.integers(1, 4, size=2)
        layer = Conv2D(int(c_in), int(c_out), rng, kernel=kernel, stride=stride)
        layer.bias.values[...] = rng.normal(size=layer.bias.shape)
        x = rng.normal(size=(2, int(rng.integers(kernel, 7)), int(rng.integers(kernel, 7)), int(c_in)))
        worst = max(worst, _layer_errors(layer, x, rng))
    assert worst < TOL


def test_conv2d_matches_direct_loops(rng):
    layer = Conv2D(2, 3, rng, kernel=3, stride=2)
    layer.bias.values[...] = rng.normal(size=3)
    x = rng.normal(size=(2, 7, 6, 2))
    out = layer.forward(x)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    w = layer.weight.values
    ref = np.zeros_like(out)
    for n in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                for f in range(3):
                    ref[n, i, j, f] = np.sum(patch * w[:, :, :, f].transpose(1, 2, 0)) + layer.bias.values[f]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("layer_cls", [ReLU, Sigmoid, GlobalAvgPool, Flatten])
def test_parameter_free_layers_fd(layer_cls):
    worst = 0.0
    for t in range(TRIALS):
        rng = np.random.default_rng(200 + t)
        x = _away_from_zero(rng, (2, 3, 3, 2))
        worst = max(worst, _layer_errors(layer_cls(), x, rng))
    assert worst < TOL


def test_dropout_fd_with_replayed_mask():
    worst = 0.0
    for t in range(TRIALS):
        rng = np.random.default_rng(300 + t)
        layer = Dropout(0.5)
        x = rng.normal(size=(3, 4))
        layer.forward(x, training=True, rng=rng)
        layer.replay = True
        worst = max(worst, _layer_errors(layer, x, rng, training=True))
    assert worst < TOL


def test_layer_examples():
    rng = np.random.default_rng(0)
    dense = Dense(2, 2, rng)
    dense.weight.values[...] = np.eye(2)
    np.testing.assert_array_equal(dense.forward(np.array([[1.0, 2.0]])), [[1.0, 2.0]])
    np.testing.assert_array_equal(dense.backward(np.array([[1.0, 0.0]])), [[1.0, 0.0]])

    gap = GlobalAvgPool()
    np.testing.assert_array_equal(gap.forward(np.full((1, 2, 2, 1), 3.0)), [[3.0]])
    np.testing.assert_array_equal(gap.backward(np.array([[1.0]])), np.full((1, 2, 2, 1), 0.25))

    conv = Conv2D(1, 1, rng, kernel=1)
    conv.weight.values[...] = 2.0
    np.testing.assert_array_equal(conv.forward(np.ones((1, 2, 2, 1))), np.full((1, 2, 2, 1), 2.0))


@given(arrays(np.float64, (2, 3, 4, 2), elements=st.floats(-10, 10)), st.floats(-10, 10))
def test_gap_constant_and_uniform_backward(x, g):
    gap = GlobalAvgPool()
    const = np.full_like(x, 1.5)
    np.testing.assert_allclose(gap.forward(const), 1.5)
    gap.forward(x)
    grad = gap.backward(np.full((2, 2), g))
    np.testing.assert_allclose(grad.sum(axis=(1, 2)), np.full((2, 2), g), atol=1e-12)


def test_dropout_preserves_expectation():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.5, 2.0, size=8)
    layer = Dropout(0.8)
    total = np.zeros_like(x)
    for _ in range(10_000):
        total += layer.forward(x[None, :], training=True, rng=rng)[0]
    np.testing.assert_allclose(total / 10_000, x, rtol=0.02 * 3)
    assert np.max(np.abs(total / 10_000 - x) / x) < 0.1


def test_dropout_mean_within_two_percent():
    rng = np.random.default_rng(6)
    x = rng.uniform(0.5, 2.0, size=(10_000, 1))
    out = Dropout(0.5).forward(x, training=True, rng=rng)
    assert abs(out.mean() / x.mean() - 1.0) < 0.02


def test_dropout_inference_identity_and_contracts():
    x = np.arange(6.0).reshape(2, 3)
    layer = Dropout(0.5)
    assert layer.forward(x) is x
    np.testing.assert_array_equal(layer.backward(np.ones_like(x)), np.ones_like(x))
    with pytest.raises(ValueError):
        layer.forward(x, training=True)
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_backward_without_forward_rejected():
    with pytest.raises(RuntimeError):
        ReLU().backward(np.ones(3))
    layer = Dense(2, 2, np.random.default_rng(0))
    layer.forward(np.ones((1, 2)))
    layer.backward(np.ones((1, 2)))
    with pytest.raises(RuntimeError):
        layer.backward(np.ones((1, 2)))


def test_shape_mismatch_reports_dimensions():
    layer = Dense(3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="3"):
        layer.forward(np.ones((1, 4)))
    conv = Conv2D(3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        conv.forward(np.ones((1, 4, 4, 2)))


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), 10, 20, (10, 20))
    limit = math.sqrt(6 / 30)
    assert np.all(np.abs(w) <= limit) and np.abs(w).max() > 0.9 * limit


def test_tensor_grad_shape_tracks_values():
    t = Tensor(np.arange(6).reshape(2, 3))
    assert t.grad.shape == t.shape and t.values.dtype == np.float64
    t.grad += 1.0
    t.zero_grad()
    assert not t.grad.any()


def test_sequential_taps():
    rng = np.random.default_rng(0)
    seq = Sequential([Dense(3, 4, rng), ReLU(), Dense(4, 2, rng)], taps={"hidden": 1})
    out, tapped = seq.forward(np.ones((2, 3)), collect=["hidden"])
    assert out.shape == (2, 2) and tapped["hidden"].shape == (2, 4)
    assert np.all(tapped["hidden"] >= 0)


# Losses


def test_wbce_examples():
    loss, _ = wbce_loss(0.5, 1, pos_weight=0.82)
    assert loss == pytest.approx(0.82 * math.log(2))
    assert wbce_loss(0.5, 0, neg_weight=0.18)[0] == pytest.approx(0.18 * math.log(2))
    assert wbce_loss(1 - EPS_CLIP, 1, 3.0, 2.0)[0] < 1e-6


@given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
def test_wbce_unit_weights_equals_bce(p, y):
    loss, _ = wbce_loss(p, y)
    # np.log and math.log may differ in the last ulp.
    assert loss == pytest.approx(-(y * math.log(p) + (1 - y) * math.log(1 - p)), rel=1e-14)


def test_wbce_gradient_fd():
    worst = 0.0
    for t in range(TRIALS):
        rng = np.random.default_rng(400 + t)
        p, y = rng.uniform(0.01, 0.99), int(rng.integers(0, 2))
        pw, nw = rng.uniform(0.1, 2.0, size=2)
        _, g = wbce_loss(p, y, pw, nw)
        eps = 1e-5
        num = (wbce_loss(p + eps, y, pw, nw)[0] - wbce_loss(p - eps, y, pw, nw)[0]) / (2 * eps)
        worst = max(worst, relative_error(g, num))
    assert worst < TOL


def test_wbce_gradient_zero_where_clipped():
    _, g = wbce_loss(np.array([0.0, 1.0]), np.array([1, 0]))
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_mse_examples():
    assert mse_loss(3.0, 3.0) == (0.0, 0.0)
    assert mse_loss(1.0, 0.0) == (1.0, 2.0)
    loss, _ = mse_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert loss.mean() == 1.0


def test_mse_gradient_fd():
    worst = 0.0
    for t in range(TRIALS):
        rng = np.random.default_rng(500 + t)
        a, b = rng.normal(size=2)
        num = (mse_loss(a + 1e-5, b)[0] - mse_loss(a - 1e-5, b)[0]) / 2e-5
        worst = max(worst, relative_error(mse_loss(a, b)[1], num))
    assert worst < TOL


def test_cce_examples():
    assert cce_loss(np.zeros(8), 3)[0] == pytest.approx(math.log(8))
    assert cce_loss(np.array([30.0, 0.0, 0.0]), 0)[0] < 1e-12
    assert cce_loss(np.array([1.0, 2.0]), 1)[0] == pytest.approx(math.log(1 + math.exp(-1)))
    with pytest.raises(ValueError):
        cce_loss(np.zeros(3), 3)


def test_cce_gradient_fd():
    worst = 0.0
    for t in range(TRIALS):
        rng = np.random.default_rng(600 + t)
        k = int(rng.integers(2, 7))
        z = Tensor(rng.normal(size=k) * 3)
        label = int(rng.integers(0, k))
        _, g = cce_loss(z.values, label)
        worst = max(worst, relative_error(g, central_difference(lambda: cce_loss(z.values, label)[0], z)))
    assert worst < TOL


@given(arrays(np.float64, 5, elements=st.floats(-50, 50)), st.floats(-1e3, 1e3), st.integers(0, 4))
def test_cce_shift_invariant(z, c, label):
    assert abs(cce_loss(z + c, label)[0] - cce_loss(z, label)[0]) < 1e-10


@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_cce_gradient_rows_sum_to_zero(z):
    _, g = cce_loss(z, np.array([0, 1, 3]))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


@given(arrays(np.float64, 10, elements=st.floats(-700, 700)))
def test_sigmoid_stable_and_bounded(x):
    s = sigmoid(x)
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-12)


# Optimizer


def test_sgd_plain_step():
    w = Tensor(np.array([1.0]))
    opt = NesterovSGD([w], lr=0.1, momentum=0.0)
    opt.lookahead()
    w.grad[...] = 1.0
    opt.step()
    assert w.values[0] == pytest.approx(0.9)


def test_zero_gradient_leaves_params():
    w = Tensor(np.array([1.0, -2.0]))
    opt = NesterovSGD([w], lr=0.5, momentum=0.9)
    for _ in range(3):
        opt.zero_grad()
        opt.lookahead()
        opt.step()
    np.testing.assert_array_equal(w.values, [1.0, -2.0])


def test_nesterov_matches_hand_unrolled_recurrence():
    # f(w) = 0.5 * a * w^2, gradient a * w evaluated at the look-ahead point.
    a, lr, mu, w0 = 3.0, 0.05, 0.9, 2.0
    w = Tensor(np.array([w0]))
    opt = NesterovSGD([w], lr=lr, momentum=mu)
    ref_w, ref_v = w0, 0.0
    for _ in range(2):
        opt.zero_grad()
        opt.lookahead()
        w.grad[...] = a * w.values
        opt.step()
        g = a * (ref_w + mu * ref_v)
        ref_v = mu * ref_v - lr * g
        ref_w = ref_w + ref_v
        assert w.values[0] == pytest.approx(ref_w, abs=1e-15)
    # second step by hand: v1 = -lr*a*w0, w1 = w0 + v1; v2 = mu*v1 - lr*a*(w1 + mu*v1)
    v1 = -lr * a * w0
    w1 = w0 + v1
    v2 = mu * v1 - lr * a * (w1 + mu * v1)
    assert w.values[0] == pytest.approx(w1 + v2, abs=1e-15)


def test_nonfinite_gradient_aborts():
    w = Tensor(np.array([1.0]))
    opt = NesterovSGD([w], lr=0.1)
    opt.lookahead()
    w.grad[...] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        opt.step()


def test_optimizer_contracts():
    with pytest.raises(ValueError):
        NesterovSGD([], lr=0.0)
    with pytest.raises(ValueError):
        NesterovSGD([], lr=0.1, momentum=1.0)
    opt = NesterovSGD([Tensor(np.ones((2, 3)))], lr=0.1)
    assert opt.velocity[0].shape == (2, 3) and not opt.velocity[0].any()


@settings(max_examples=30)
@given(st.floats(1e-3, 1.0), st.floats(0.0, 0.99))
def test_linear_mse_fd_exact(lr, mu):
    # Quadratic objectives make central differences exact up to rounding.
    rng = np.random.default_rng(0)
    layer = Dense(3, 1, rng)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 1))

    def fn():
        return float(np.mean(mse_loss(layer.forward(x), y)[0]))

    loss, grad = mse_loss(layer.forward(x), y)
    layer.backward(grad / len(x))
    assert relative_error(layer.weight.grad, central_difference(fn, layer.weight)) < 1e-6
