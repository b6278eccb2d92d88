import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xraynet import layers as L
from xraynet.errors import DegenerateBatch, EmptyOutput, InvalidRate, LabelOutOfRange, ShapeMismatch
from xraynet.tensor import Tape, Tensor

from layer_cases import LAYER_CASES, dropout_cases
from oracles import gradient_check, naive_conv2d, naive_depthwise


def _rel(got, want):
    return np.abs(got - want).max() / max(np.abs(want).max(), 1e-12)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", [0, 1])
def test_conv2d_matches_naive(stride, padding):
    rng = np.random.default_rng(10 * stride + padding)
    for _ in range(5):
        k = int(rng.integers(1, 4))
        x = Tensor(rng.normal(size=(2, int(rng.integers(1, 4)), 7, 6)))
        w = Tensor(rng.normal(size=(int(rng.integers(1, 5)), x.shape[1], k, k)))
        b = Tensor(rng.normal(size=w.shape[0]))
        got = L.conv2d(x, w, b, stride=stride, padding=padding).data
        want = naive_conv2d(x.data, w.data, b.data, (stride, stride), (padding, padding))
        assert got.shape == want.shape
        assert _rel(got, want) <= 1e-5


def test_conv2d_identity_kernel():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 5, 5)))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1
    np.testing.assert_array_equal(L.conv2d(x, Tensor(w), padding=1).data, x.data)


def test_conv2d_zero_kernel():
    x = Tensor(np.ones((1, 2, 4, 4)))
    assert np.all(L.conv2d(x, Tensor(np.zeros((3, 2, 3, 3)))).data == 0)


def test_conv2d_errors():
    x = Tensor(np.ones((1, 2, 4, 4)))
    with pytest.raises(ShapeMismatch):
        L.conv2d(x, Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(EmptyOutput):
        L.conv2d(x, Tensor(np.ones((1, 2, 5, 5))))


def test_depthwise_matches_naive():
    rng = np.random.default_rng(3)
    for stride in (1, 2):
        for padding in (0, 1):
            x = Tensor(rng.normal(size=(2, 3, 6, 5)))
            w = Tensor(rng.normal(size=(3, 1, 3, 3)))
            got = L.depthwise_conv2d(x, w, stride, padding).data
            assert _rel(got, naive_depthwise(x.data, w.data, (stride, stride), (padding, padding))) <= 1e-5


def test_depthwise_separable_is_composition():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 4, 6, 6)))
    dw, pw = Tensor(rng.normal(size=(4, 1, 3, 3))), Tensor(rng.normal(size=(5, 4, 1, 1)))
    want = naive_conv2d(naive_depthwise(x.data, dw.data, padding=(1, 1)), pw.data)
    assert _rel(L.depthwise_separable(x, dw, pw).data, want) <= 1e-5


def test_separable_parameter_economy():
    p = L.DepthwiseSeparableParams(Tensor(np.zeros((16, 1, 3, 3))), Tensor(np.zeros((32, 16, 1, 1))))
    assert p.parameter_count == 656 == L.parameter_count_separable(3, 16, 32)
    assert L.parameter_count_standard_conv(3, 16, 32) == 4608
    assert round(656 / 4608, 4) == 0.1424


def test_batch_norm_train_normalizes():
    x = Tensor(np.random.default_rng(5).normal(3.0, 4.0, size=(64, 3, 2, 2)))
    bn = L.BatchNormParams.identity(3)
    y = bn(x, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batch_norm_eval_identity_statistics():
    x = Tensor(np.random.default_rng(6).normal(size=(4, 3)))
    out = L.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
    np.testing.assert_allclose(out.data, x.data / np.sqrt(1 + L.BN_EPSILON), rtol=1e-6)


def test_batch_norm_running_update():
    x = Tensor(np.array([[1.0], [3.0], [5.0]]))
    mean, var = np.zeros(1), np.ones(1)
    L.batch_norm(x, Tensor([1.0]), Tensor([0.0]), mean, var, training=True)
    np.testing.assert_allclose(mean, [0.01 * 3], rtol=1e-6)
    np.testing.assert_allclose(var, [0.99 + 0.01 * 4], rtol=1e-6)


def test_batch_norm_eval_leaves_stats():
    mean, var = np.array([0.5]), np.array([2.0])
    L.batch_norm(Tensor([[1.0], [2.0]]), Tensor([1.0]), Tensor([0.0]), mean, var, training=False)
    assert mean[0] == 0.5 and var[0] == 2.0


def test_batch_norm_single_sample_training():
    with pytest.raises(DegenerateBatch):
        L.batch_norm(Tensor([[1.0, 2.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), np.zeros(2), np.ones(2), True)


def test_dropout_statistics():
    x = Tensor(np.ones(100_000))
    y = L.dropout(x, 0.5, True, np.random.default_rng(0)).data
    frac = (y == 0).mean()
    assert abs(frac - 0.5) < 0.01
    assert set(np.unique(y)) == {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.02


def test_dropout_identity_cases():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    assert L.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert L.dropout(x, 0.9, False) is x


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_invalid_rate(rate):
    with pytest.raises(InvalidRate):
        L.dropout(Tensor([1.0]), rate, True, np.random.default_rng(0))


def test_gap_example():
    x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
    out = L.global_average_pool(x)
    assert out.shape == (1, 1)
    assert out.data[0, 0] == 4.0


def test_dense_identity():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
    np.testing.assert_array_equal(L.dense(x, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x.data)


def test_dense_composes_linearly():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 3)))
    w1, w2 = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    z4, z2 = Tensor(np.zeros(4)), Tensor(np.zeros(2))
    two_step = L.dense(L.dense(x, w1, z4), w2, z2).data
    one_step = L.dense(x, Tensor(w1.data @ w2.data), z2).data
    np.testing.assert_allclose(two_step, one_step, rtol=1e-5, atol=1e-6)


def test_dense_shape_errors():
    with pytest.raises(ShapeMismatch):
        L.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeMismatch):
        L.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.zeros(3)))


def test_softmax_xent_uniform_logits():
    loss, probs = L.softmax_cross_entropy(Tensor(np.zeros((1, 7))), [3])
    assert math.isclose(loss.item(), math.log(7), rel_tol=1e-6)
    assert round(loss.item(), 4) == 1.9459
    np.testing.assert_allclose(probs.data, 1 / 7, rtol=1e-6)


def test_softmax_xent_large_logits_stable():
    loss, probs = L.softmax_cross_entropy(Tensor([[1000.0, 0.0, 0.0]]), [0])
    assert np.isfinite(loss.item()) and loss.item() < 1e-6
    assert np.all(np.isfinite(probs.data))


def test_softmax_xent_label_range():
    with pytest.raises(LabelOutOfRange):
        L.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2**31))
def test_softmax_rows_and_permutation(n, k, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, k)) * 10
    p = L.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1, rtol=1e-9)
    perm = rng.permutation(k)
    np.testing.assert_allclose(L.softmax(z[:, perm]), p[:, perm], rtol=1e-9)


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients(name):
    rng = np.random.default_rng(sorted(LAYER_CASES).index(name))
    errors = [gradient_check(build, arrays) for build, arrays in LAYER_CASES[name](rng, 10)]
    assert max(errors) <= 1e-4


def test_dropout_gradient():
    rng = np.random.default_rng(99)
    assert max(gradient_check(b, a) for b, a in dropout_cases(rng, 10)) <= 1e-4


def test_frozen_weights_get_no_gradient():
    x = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    w = Tensor(np.ones((1, 2, 3, 3)))
    with Tape():
        loss = L.conv2d(x, w).sum()
    loss.backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))
