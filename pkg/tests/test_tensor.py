import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maam import tensor as T
from maam.errors import ConfigurationError, DegenerateBatchError, GradientError, LabelError, ShapeError
from maam.tensor import Tensor


def conv_reference(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation in float64."""
    x = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = x[a, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[a, o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def pool_reference(x, k):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // k, w // k))
    for i in range(h // k):
        for j in range(w // k):
            out[:, :, i, j] = x[:, :, i * k : (i + 1) * k, j * k : (j + 1) * k].max(axis=(2, 3))
    return out


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (1, 2, 5), (1, 3, 7), (2, 0, 3), (1, 0, 1)])
def test_conv2d_matches_loops(rng, stride, padding, k):
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, conv_reference(x, w, b, stride, padding), rtol=1e-5, atol=1e-4)


def test_conv2d_same_padding_keeps_size(rng):
    for k in (3, 5, 7):
        out = T.conv2d(Tensor(rng.standard_normal((1, 3, 32, 32))), Tensor(rng.standard_normal((2, 3, k, k))), None, 1, k // 2)
        assert out.shape == (1, 2, 32, 32)


def test_conv2d_shape_errors_name_the_axis(rng):
    with pytest.raises(ShapeError, match="axis 1"):
        T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))))
    with pytest.raises(ShapeError, match="4-D"):
        T.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((4, 2, 3, 3))))
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((4, 2, 3, 3))))


def test_maxpool_matches_reference(rng):
    x = rng.standard_normal((2, 3, 8, 6))
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x), 2).data, pool_reference(x.astype(np.float32), 2))


def test_maxpool_tie_routes_gradient_to_first_max():
    x = T.parameter(np.ones((1, 1, 2, 2)))
    with T.Tape() as tape:
        loss = T.sum(T.maxpool2d(x, 2))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_rejects_overlap_and_odd_sizes():
    with pytest.raises(ConfigurationError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 4, 4))), 2, 1)
    with pytest.raises(ConfigurationError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_batchnorm_train_closed_form(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = T.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, train=True).data

    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    expect = (x - mean[:, None, None]) / np.sqrt(var[:, None, None] + T.BN_EPS) * gamma[:, None, None] + beta[:, None, None]
    np.testing.assert_allclose(out, expect, rtol=1e-4, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * mean, rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-5)


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    rm, rv = np.array([0.5, -1.0], np.float32), np.array([4.0, 0.25], np.float32)
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, train=False).data
    expect = (x - rm[:, None, None]) / np.sqrt(rv[:, None, None] + T.BN_EPS)
    np.testing.assert_allclose(out, expect, rtol=1e-5, atol=1e-5)
    np.testing.assert_array_equal(rm, [0.5, -1.0])


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        T.batchnorm2d(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2, np.float32), np.ones(2, np.float32), True)


def test_relu_subgradient_at_zero_is_zero():
    x = T.parameter(np.array([-1.0, 0.0, 2.0]))
    with T.Tape() as tape:
        loss = T.sum(T.relu(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_linear_matches_numpy(rng):
    x, w, b = rng.standard_normal((4, 6)), rng.standard_normal((3, 6)), rng.standard_normal(3)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w.T + b, rtol=1e-5, atol=1e-5)
    with pytest.raises(ShapeError):
        T.linear(Tensor(x), Tensor(rng.standard_normal((3, 5))))


def test_cross_entropy_reference(rng):
    logits = rng.standard_normal((6, 10)) * 4
    labels = rng.integers(0, 10, 6)
    expect = np.mean(np.log(np.exp(logits).sum(axis=1)) - logits[np.arange(6), labels])
    assert T.cross_entropy(Tensor(logits), labels).item() == pytest.approx(expect, rel=1e-5)
    assert T.cross_entropy(Tensor(np.zeros((3, 10))), [0, 1, 2]).item() == pytest.approx(np.log(10), rel=1e-6)


def test_cross_entropy_is_stable_for_huge_logits():
    logits = np.array([[1e4, 0.0, -1e4]])
    assert np.isfinite(T.cross_entropy(Tensor(logits), [1]).item())


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(LabelError):
        T.cross_entropy(Tensor(np.zeros((2, 10))), [0, 10])
    with pytest.raises(ShapeError):
        T.cross_entropy(Tensor(np.zeros((2, 10))), [0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    y = T.softmax(Tensor(np.array(values))).data
    assert np.all(y >= 0)
    assert y.sum() == pytest.approx(1.0, abs=1e-6)
    assert y[np.argmax(np.asarray(values, dtype=np.float32))] == y.max()


def test_backward_requires_scalar_loss_on_the_tape():
    x = T.parameter(np.ones(3))
    with T.Tape() as tape:
        y = T.relu(x)
    with pytest.raises(GradientError, match="scalar"):
        tape.backward(y)
    with pytest.raises(GradientError):
        T.Tape().backward(T.sum(x))


def test_gradients_accumulate_over_reuse():
    x = T.parameter(np.array([1.0, -2.0]))
    with T.Tape() as tape:
        loss = T.sum(T.add(T.mul(x, x), x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_intermediate_grad_only_when_retained():
    x = T.parameter(np.array([1.0, 2.0]))
    with T.Tape() as tape:
        h = T.mul(x, x)
        h.retain_grad = True
        k = T.relu(h)
        loss = T.sum(k)
    tape.backward(loss)
    np.testing.assert_allclose(h.grad, [1, 1])
    assert k.grad is None


def test_no_tape_records_nothing():
    x = T.parameter(np.ones(2))
    tape = T.Tape()
    T.relu(x)
    assert len(tape) == 0
    with tape:
        T.relu(Tensor(np.ones(2)))  # constant input
    assert len(tape) == 0


def test_make_rng_streams():
    a = T.make_rng(3, 1).random(4)
    np.testing.assert_array_equal(a, T.make_rng(3, 1).random(4))
    assert not np.array_equal(a, T.make_rng(3, 2).random(4))
    assert not np.array_equal(a, T.make_rng(4, 1).random(4))


def test_everything_is_float32(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    assert x.data.dtype == np.float32
    w = Tensor(rng.standard_normal((2, 3, 3, 3)))
    assert T.conv2d(x, w, None, 1, 1).data.dtype == np.float32
    assert T.maxpool2d(x).data.dtype == np.float32


# ---------------------------------------------------------------------------
# small worked cases
# ---------------------------------------------------------------------------


def test_conv2d_zero_input_gives_bias(rng):
    out = T.conv2d(Tensor(np.zeros((2, 3, 5, 5))), Tensor(rng.standard_normal((4, 3, 3, 3))), Tensor([1.0, -2.0, 0.5, 3.0]), 1, 1)
    np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5, 3.0], np.float32)[None, :, None, None], out.shape))


def test_conv2d_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_conv2d_brute_force_small(rng):
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    np.testing.assert_allclose(got, conv_reference(x.astype(np.float32), w.astype(np.float32), None, 1, 1), atol=1e-5)


def test_maxpool_small_cases(rng):
    assert T.maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).item() == 4.0
    np.testing.assert_array_equal(T.maxpool2d(Tensor(np.full((1, 2, 4, 4), 2.5))).data, 2.5)
    x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x)).data, pool_reference(x, 2))


def test_batchnorm_normalises_each_channel(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * [[[[5.0]], [[0.5]], [[2.0]]]] + 7
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3, np.float32), np.ones(3, np.float32), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batchnorm_zero_gamma_gives_beta(rng):
    beta = np.array([0.5, -1.5], np.float32)
    out = T.batchnorm2d(Tensor(rng.standard_normal((2, 2, 3, 3))), Tensor(np.zeros(2)), Tensor(beta), np.zeros(2, np.float32), np.ones(2, np.float32), True).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.5])).data, [0.0, 2.5])


def test_ops_stay_finite_on_extreme_inputs():
    x = Tensor(np.full((2, 3, 4, 4), 1e18))
    w = Tensor(np.full((2, 3, 3, 3), 1e-18))
    assert np.isfinite(T.conv2d(x, w, None, 1, 1).data).all()
    bn = T.batchnorm2d(Tensor(np.full((2, 2, 2, 2), 1e6)), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2, np.float32), np.ones(2, np.float32), True)
    assert np.isfinite(bn.data).all()
    assert np.isfinite(T.softmax(Tensor([1e30, -1e30, 0.0])).data).all()
