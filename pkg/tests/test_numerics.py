import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from godet import numerics as nx
from godet.gradcheck import SUITES, TOLERANCE, run_suites


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    y, _ = nx.conv2d(x, w, np.zeros(3))
    np.testing.assert_array_equal(y, x)


def test_conv_all_ones():
    y, _ = nx.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 9.0


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((1, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 2))
    b = rng.standard_normal(3)
    y, _ = nx.conv2d(x, w, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for f in range(3):
        for i in range(y.shape[2]):
            for j in range(y.shape[3]):
                ref[0, f, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * w[f]).sum() + b[f]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv_patch_fast_path_matches_general(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    w = rng.standard_normal((4, 3, 4, 4))
    b = rng.standard_normal(4)
    y, cache = nx.conv2d(x, w, b, stride=4)
    # same result through the sliding-window path (padding forces it)
    y2, _ = nx.conv2d(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))[:, :, 1:-1, 1:-1], w, b, stride=4)
    np.testing.assert_allclose(y, y2)
    g = rng.standard_normal(y.shape)
    dx, dw, db = nx.conv2d_backward(g, cache)
    err = nx.finite_diff_check(
        lambda v: (float((nx.conv2d(v, w, b, 4)[0] * g).sum()), nx.conv2d_backward(g, nx.conv2d(v, w, b, 4)[1])[0]),
        x)
    assert err <= 1e-6
    none_dx, dw2, db2 = nx.conv2d_backward(g, cache, need_dx=False)
    assert none_dx is None
    np.testing.assert_array_equal(dw, dw2)


def test_conv_errors_name_dimension():
    with pytest.raises(ValueError, match="channel"):
        nx.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="height"):
        nx.conv2d(np.zeros((1, 1, 2, 5)), np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="width"):
        nx.conv2d(np.zeros((1, 1, 5, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="bias"):
        nx.conv2d(np.zeros((1, 1, 5, 5)), np.zeros((2, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="NCHW"):
        nx.conv2d(np.zeros((1, 5, 5)), np.zeros((1, 1, 3, 3)), np.zeros(1))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2))
def test_conv_output_shape_formula(h, w, k, stride, pad):
    if h + 2 * pad < k or w + 2 * pad < k:
        return
    y, _ = nx.conv2d(np.zeros((1, 1, h, w)), np.zeros((2, 1, k, k)), np.zeros(2), stride, pad)
    assert y.shape == (1, 2, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


def test_conv_gradcheck_small(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    g = rng.standard_normal((1, 3, 5, 5))

    def op(v):
        y, cache = nx.conv2d(x, v, b, 1, 1)
        return float((y * g).sum()), nx.conv2d_backward(g, cache)[1]

    assert nx.finite_diff_check(op, w) <= 1e-3


# -- relu / pooling ----------------------------------------------------------

def test_relu():
    y, mask = nx.relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0, 0, 2])
    np.testing.assert_array_equal(nx.relu_backward(np.ones(3), mask), [0, 0, 1])


def test_relu_gradcheck_away_from_kink(rng):
    x = rng.uniform(0.1, 1.0, 20) * rng.choice([-1, 1], 20)
    g = rng.standard_normal(20)

    def op(v):
        y, mask = nx.relu(v)
        return float((y * g).sum()), nx.relu_backward(g, mask)

    assert nx.finite_diff_check(op, x) <= 1e-6


def test_max_pool_example_and_routing():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, cache = nx.max_pool2d(x, 2, 2)
    assert y.item() == 4.0
    dx = nx.max_pool2d_backward(np.array([[[[5.0]]]]), cache)
    np.testing.assert_array_equal(dx, [[[[0, 0], [0, 5.0]]]])


def test_max_pool_rejects_oversized_window():
    with pytest.raises(ValueError):
        nx.max_pool2d(np.zeros((1, 1, 2, 2)), 3)


# -- bilinear ----------------------------------------------------------------

def test_bilinear_grid_point_and_midpoint():
    f = np.array([[2.0, 4.0], [6.0, 8.0]])
    assert nx.bilinear_sample(f, 1.0, 1.0) == 8.0
    assert nx.bilinear_sample(f, 0.5, 0.0) == 3.0


def test_bilinear_edge_clamp():
    f = np.array([[2.0, 4.0], [6.0, 8.0]])
    assert nx.bilinear_sample(f, -3.0, 0.0) == 2.0
    assert nx.bilinear_sample(f, 5.0, 9.0) == 8.0


def test_bilinear_matches_four_corner_formula(rng):
    f = rng.standard_normal((3, 6, 7))
    for _ in range(100):
        x, y, c = rng.uniform(0, 6), rng.uniform(0, 5), int(rng.integers(3))
        x0, y0 = min(int(x), 5), min(int(y), 4)
        fx, fy = x - x0, y - y0
        m = f[c]
        ref = (m[y0, x0] * (1 - fx) * (1 - fy) + m[y0, x0 + 1] * fx * (1 - fy)
               + m[y0 + 1, x0] * (1 - fx) * fy + m[y0 + 1, x0 + 1] * fx * fy)
        assert abs(nx.bilinear_sample(f, x, y, c) - ref) <= 1e-12


# -- linear ------------------------------------------------------------------

def test_linear_examples(rng):
    x = rng.standard_normal((4, 3))
    y, _ = nx.linear(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(y, x)
    w = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y, _ = nx.linear(np.array([1.0, 2.0]), w, np.zeros(3))
    np.testing.assert_array_equal(y, [1, 2, 3])


def test_linear_shape_errors():
    with pytest.raises(ValueError, match="input width"):
        nx.linear(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(4))
    with pytest.raises(ValueError, match="bias"):
        nx.linear(np.zeros((2, 2)), np.zeros((4, 2)), np.zeros(3))


def test_linear_gradcheck_is_second_order_accurate(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((2, 4))
    b = rng.standard_normal(2)
    g = rng.standard_normal((3, 2))

    def op(v):
        y, cache = nx.linear(v, w, b)
        return float((y * g).sum()), nx.linear_backward(g, cache)[0]

    assert nx.finite_diff_check(op, x, epsilon=1e-3) <= 1e-6


# -- losses ------------------------------------------------------------------

def test_cross_entropy_examples():
    loss, _ = nx.softmax_cross_entropy(np.zeros(3), 1)
    assert loss == pytest.approx(math.log(3))
    loss, _ = nx.softmax_cross_entropy(np.array([0.0, 1000.0, 0.0]), 1)
    assert loss == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        nx.softmax_cross_entropy(np.zeros(3), 3)


def test_cross_entropy_grad_is_softmax_minus_onehot(rng):
    logits = rng.standard_normal((5, 4))
    t = rng.integers(0, 4, 5)
    _, d = nx.softmax_cross_entropy(logits, t)
    onehot = np.eye(4)[t]
    np.testing.assert_allclose(d, (nx.softmax(logits) - onehot) / 5, atol=1e-15)


def test_softmax_normalized(rng):
    p = nx.softmax(rng.standard_normal((50, 7)) * 30)
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12


def test_smooth_l1_examples():
    for x, want in ((0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)):
        assert nx.smooth_l1(np.array([x]))[0] == pytest.approx(want)
    _, g = nx.smooth_l1(np.array([-3.0, 0.25, 3.0]))
    np.testing.assert_array_equal(g, [-1.0, 0.25, 1.0])


# -- optimizer ---------------------------------------------------------------

def test_sgd_examples():
    p = nx.Parameter("w", np.array([1.0]))
    p.grad[:] = 0.5
    nx.sgd_step([p], 0.001)
    assert p.value[0] == pytest.approx(0.9995)
    assert p.grad[0] == 0.0
    nx.sgd_step([p], 0.001)
    assert p.value[0] == pytest.approx(0.9995)


def test_sgd_two_steps_equal_one_summed(rng):
    g1, g2 = rng.standard_normal(5), rng.standard_normal(5)
    a = nx.Parameter("a", np.ones(5))
    b = nx.Parameter("b", np.ones(5))
    a.grad[:] = g1
    nx.sgd_step([a], 0.1)
    a.grad[:] = g2
    nx.sgd_step([a], 0.1)
    b.grad[:] = g1 + g2
    nx.sgd_step([b], 0.1)
    np.testing.assert_allclose(a.value, b.value, atol=1e-15)


def test_sgd_momentum_accumulates():
    p = nx.Parameter("w", np.zeros(1))
    for _ in range(2):
        p.grad[:] = 1.0
        nx.sgd_step([p], 1.0, momentum=0.5)
    assert p.value[0] == pytest.approx(-(1.0 + 1.5))


def test_parameter_shape_check():
    with pytest.raises(ValueError):
        nx.Parameter("w", np.zeros(3), np.zeros(2))


def test_lr_schedule_defaults():
    hp = nx.TrainHyperparams()
    assert (hp.learning_rate, hp.decay_factor, hp.decay_every_epochs, hp.batch_size) == (0.001, 0.1, 5, 4)
    assert nx.lr_schedule(hp, 0) == pytest.approx(0.001)
    assert nx.lr_schedule(hp, 4) == pytest.approx(0.001)
    assert nx.lr_schedule(hp, 5) == pytest.approx(0.0001)
    assert nx.lr_schedule(hp, 10) == pytest.approx(0.00001)
    with pytest.raises(ValueError):
        nx.lr_schedule(hp, -1)


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(decay_factor=0), dict(decay_factor=1.5),
                                dict(batch_size=0), dict(decay_every_epochs=0), dict(momentum=1.0)])
def test_hyperparam_validation(kw):
    with pytest.raises(ValueError):
        nx.TrainHyperparams(**kw)


# -- gradient checking -------------------------------------------------------

def test_relative_error_floor():
    assert nx.relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)
    assert nx.relative_error(np.array([2.0]), np.array([1.0])) == 0.5


def test_finite_diff_detects_wrong_gradient():
    err = nx.finite_diff_check(lambda v: (float((v ** 2).sum()), 3 * v), np.array([1.0, -2.0]))
    assert err > 0.3
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda v: (0.0, v), np.zeros(1), epsilon=0)


@pytest.mark.parametrize("name", list(SUITES))
def test_gradcheck_suite(name):
    (res,) = run_suites(seed=7, names=[name])
    assert res.max_rel_error <= TOLERANCE
