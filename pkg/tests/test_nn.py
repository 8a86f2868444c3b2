import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from camloc import nn
from conftest import numeric_grad, rel_error


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(n):
        for o in range(f):
            for r in range(oh):
                for s in range(ow):
                    acc = b[o]
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[i, ch, r * stride + p, s * stride + q] * w[o, ch, p, q]
                    out[i, o, r, s] = acc
    return out


# -- convolution ------------------------------------------------------------


def test_conv_all_ones():
    out, _ = nn.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9


def test_conv_delta_kernel_stride2_selects_pixels():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0] = 1
    out, _ = nn.conv2d_forward(x, w, np.zeros(1), stride=2)
    np.testing.assert_array_equal(out[0, 0], [[x[0, 0, 0, 0], x[0, 0, 0, 2]], [x[0, 0, 2, 0], x[0, 0, 2, 2]]])


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, _ = nn.conv2d_forward(x, w, b, 1, 1)
    np.testing.assert_allclose(out, naive_conv(x, w, b, 1, 1), rtol=0, atol=1e-12)


@given(
    n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3), h=st.integers(3, 7), wd=st.integers(3, 7),
    k=st.integers(1, 3), stride=st.integers(1, 3), padding=st.integers(0, 2), seed=st.integers(0, 2**31),
)
def test_conv_matches_naive_loops_random_shapes(n, c, f, h, wd, k, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, wd))
    w = rng.standard_normal((f, c, k, k))
    b = rng.standard_normal(f)
    out, _ = nn.conv2d_forward(x, w, b, stride, padding)
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv_output_size_formula():
    out, _ = nn.conv2d_forward(np.zeros((2, 1, 9, 7)), np.zeros((4, 1, 3, 2)), np.zeros(4), stride=2, padding=1)
    assert out.shape == (2, 4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)


def test_conv_channel_mismatch_is_shape_error():
    with pytest.raises(nn.ShapeError, match="channel"):
        nn.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_kernel_larger_than_input_rejected():
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(1)
    _, cache = nn.conv2d_forward(rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), np.zeros(3), 1, 1)
    dx, dw, db = nn.conv2d_backward(np.zeros((2, 3, 5, 5)), cache)
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_backward_single_pixel_chain_rule():
    x = np.array([[[[3.0]]]])
    _, cache = nn.conv2d_forward(x, np.array([[[[2.0]]]]), np.zeros(1))
    dx, dw, db = nn.conv2d_backward(np.array([[[[5.0]]]]), cache)
    assert dw[0, 0, 0, 0] == 15.0 and dx[0, 0, 0, 0] == 10.0 and db[0] == 5.0


def test_conv_backward_missing_cache():
    with pytest.raises(ValueError, match="cache"):
        nn.conv2d_backward(np.zeros((1, 1, 1, 1)), None)


def test_conv_backward_grad_shape_checked():
    _, cache = nn.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(nn.ShapeError):
        nn.conv2d_backward(np.zeros((1, 1, 3, 3)), cache)


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 2))
    b = rng.standard_normal(3)
    g = rng.standard_normal(nn.conv2d_forward(x, w, b, 2, 1)[0].shape)

    def loss():
        return float((nn.conv2d_forward(x, w, b, 2, 1)[0] * g).sum())

    _, cache = nn.conv2d_forward(x, w, b, 2, 1)
    dx, dw, db = nn.conv2d_backward(g, cache)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-5
    assert rel_error(dw, numeric_grad(loss, w)) < 1e-5
    assert rel_error(db, numeric_grad(loss, b)) < 1e-5


# -- batch norm -------------------------------------------------------------


def test_batchnorm_train_mean_zero_var_one():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 5, 5)) * 7 + 2
    out, _ = nn.batchnorm_forward(x, np.ones(3), np.zeros(3), nn.RunningStats.fresh(3, np.float64), "train")
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
    # eps = 1e-5 shrinks the variance by about eps / var
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-6


def test_batchnorm_affine():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8, 2, 4, 4)) * 10
    out, _ = nn.batchnorm_forward(x, np.full(2, 2.0), np.full(2, 3.0), nn.RunningStats.fresh(2, np.float64), "train")
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-9)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-5)


def test_batchnorm_running_stats_ema():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 2, 3, 3)) + 1
    rs = nn.RunningStats.fresh(2, np.float64)
    nn.batchnorm_forward(x, np.ones(2), np.zeros(2), rs, "train")
    np.testing.assert_allclose(rs.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rs.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_infer_uses_running_stats():
    rs = nn.RunningStats(np.array([1.0]), np.array([4.0]))
    out, _ = nn.batchnorm_forward(np.full((1, 1, 1, 1), 5.0), np.ones(1), np.zeros(1), rs, "infer", eps=0.0)
    assert out[0, 0, 0, 0] == 2.0
    assert rs.mean[0] == 1.0 and rs.var[0] == 4.0


def test_batchnorm_train_needs_two_values():
    with pytest.raises(ValueError):
        nn.batchnorm_forward(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2), nn.RunningStats.fresh(2), "train")


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_finite_differences(mode):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 2, 3, 2))
    gamma = rng.standard_normal(2)
    beta = rng.standard_normal(2)
    g = rng.standard_normal(x.shape)
    base = nn.RunningStats(rng.standard_normal(2), rng.random(2) + 0.5)

    def run():
        rs = nn.RunningStats(base.mean.copy(), base.var.copy())
        return nn.batchnorm_forward(x, gamma, beta, rs, mode)

    def loss():
        return float((run()[0] * g).sum())

    dx, dgamma, dbeta = nn.batchnorm_backward(g, run()[1])
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-4
    assert rel_error(dgamma, numeric_grad(loss, gamma)) < 1e-4
    assert rel_error(dbeta, numeric_grad(loss, beta)) < 1e-4


# -- relu, pooling, head ----------------------------------------------------


def test_relu_examples():
    out, cache = nn.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    _, cache = nn.relu_forward(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(nn.relu_backward(np.ones(2), cache), [0, 1])


def test_relu_finite_differences_away_from_kink():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 1e-3] = 0.5
    g = rng.standard_normal(x.shape)
    _, cache = nn.relu_forward(x)
    num = numeric_grad(lambda: float((nn.relu_forward(x)[0] * g).sum()), x)
    assert rel_error(nn.relu_backward(g, cache), num) < 1e-5


def test_maxpool_forward_and_backward():
    x = np.array([[[[1.0, 5, 2, 2], [3, 4, 2, 1], [0, 0, 9, 8], [0, 1, 7, 6]]]])
    out, cache = nn.maxpool_forward(x, 2)
    np.testing.assert_array_equal(out[0, 0], [[5, 2], [1, 9]])
    g = nn.maxpool_backward(np.ones((1, 1, 2, 2)), cache)
    assert g.sum() == 4 and g[0, 0, 0, 1] == 1 and g[0, 0, 0, 2] == 1  # first of the tied 2s


def test_gap_examples():
    assert nn.gap_forward(np.full((1, 1, 3, 3), 4.0))[0][0, 0] == 4.0
    assert nn.gap_forward(np.array([[[[1.0, 2], [3, 4]]]]))[0][0, 0] == 2.5
    x = np.array([[[[7.0]], [[-2.0]]]])
    np.testing.assert_array_equal(nn.gap_forward(x)[0], [[7.0, -2.0]])


def test_dense_examples_and_oracle():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(nn.dense_forward(x, np.eye(3), np.zeros(3))[0], x)
    np.testing.assert_array_equal(nn.dense_forward(x, np.zeros((2, 3)), np.array([1.5, -2]))[0], [[1.5, -2]] * 2)
    rng = np.random.default_rng(8)
    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
    oracle = np.array([[b[c] + sum(x[i, k] * w[c, k] for k in range(5)) for c in range(3)] for i in range(4)])
    np.testing.assert_allclose(nn.dense_forward(x, w, b)[0], oracle, rtol=0, atol=1e-12)
    with pytest.raises(nn.ShapeError):
        nn.dense_forward(x, np.zeros((3, 4)), b)


def test_softmax_cross_entropy_examples():
    loss, _ = nn.softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    loss, grad = nn.softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12) and np.all(np.isfinite(grad))


def test_softmax_cross_entropy_finite_differences():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, 5)
    _, grad = nn.softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda: nn.softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_error(grad, num) < 1e-5


@given(shift=st.floats(-50, 50), seed=st.integers(0, 2**31))
def test_softmax_cross_entropy_shift_invariant(shift, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, 4)
    a, _ = nn.softmax_cross_entropy(logits, labels)
    b, _ = nn.softmax_cross_entropy(logits + shift, labels)
    assert abs(a - b) < 1e-9


# -- optimiser --------------------------------------------------------------


def test_sgd_zero_grad_is_noop():
    p = {"a.weight": np.array([1.0, 2.0])}
    st_ = nn.OptimizerState(momentum=0.8, weight_decay=0.0)
    nn.sgd_momentum_step(p, {"a.weight": np.zeros(2)}, st_, 0.1)
    np.testing.assert_array_equal(p["a.weight"], [1.0, 2.0])


def test_sgd_plain_step():
    p = {"a.weight": np.array([1.0])}
    nn.sgd_momentum_step(p, {"a.weight": np.array([1.0])}, nn.OptimizerState(momentum=0.0, weight_decay=0.0), 0.1)
    assert p["a.weight"][0] == 1.0 - 0.1


def test_sgd_two_momentum_steps_unrolled():
    w0, g1, g2, lr, mu, wd = 1.0, 0.5, -0.25, 0.01, 0.8, 0.0005
    p = {"w.weight": np.array([w0])}
    state = nn.OptimizerState(momentum=mu, weight_decay=wd)
    nn.sgd_momentum_step(p, {"w.weight": np.array([g1])}, state, lr)
    nn.sgd_momentum_step(p, {"w.weight": np.array([g2])}, state, lr)
    v1 = -lr * (g1 + wd * w0)
    w1 = w0 + v1
    v2 = mu * v1 - lr * (g2 + wd * w1)
    w2 = w1 + v2
    assert p["w.weight"][0] == w2
    assert state.velocity["w.weight"][0] == v2


def test_weight_decay_skips_biases_and_bn():
    names = ["conv0.weight", "conv0.bias", "bn0.gamma", "bn0.beta", "fc.weight", "fc.bias"]
    p = {k: np.array([1.0]) for k in names}
    nn.sgd_momentum_step(p, {k: np.zeros(1) for k in names}, nn.OptimizerState(momentum=0.0, weight_decay=0.5), 0.1)
    assert {k for k in names if p[k][0] != 1.0} == {"conv0.weight", "fc.weight"}


def test_velocity_shapes_mirror_params():
    p = {"a.weight": np.zeros((2, 3)), "a.bias": np.zeros(2)}
    state = nn.OptimizerState()
    nn.sgd_momentum_step(p, {k: np.ones_like(v) for k, v in p.items()}, state, 0.01)
    assert {k: v.shape for k, v in state.velocity.items()} == {k: v.shape for k, v in p.items()}


@pytest.mark.parametrize("kw", [{"momentum": 1.0}, {"momentum": -0.1}, {"weight_decay": -1}, {"base_lr": 0}])
def test_optimizer_state_validation(kw):
    with pytest.raises(ValueError):
        nn.OptimizerState(**kw)


def test_lr_schedule():
    s = nn.OptimizerState()
    assert (s.momentum, s.weight_decay, s.base_lr, s.decay_per_epoch) == (0.8, 0.0005, 0.01, 0.01)
    assert nn.lr_at_epoch(s, 0) == 0.01
    assert nn.lr_at_epoch(s, 1) == pytest.approx(0.0099, rel=1e-15)
    assert nn.lr_at_epoch(s, 150) == pytest.approx(0.01 * 0.99**150, rel=1e-12)
    # the closed form is 2.2145e-3; a rougher hand figure of 2.218e-3 is off in the fourth digit
    assert nn.lr_at_epoch(s, 150) == pytest.approx(2.2145e-3, abs=1e-7)
