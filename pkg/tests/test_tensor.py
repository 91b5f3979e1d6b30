"""Autograd op correctness: forward values and finite-difference gradients."""

import numpy as np
import pytest

from sape2 import tensor as T
from sape2.oracles import finite_difference_grad
from sape2.tensor import Tensor, no_grad

RNG = np.random.default_rng(42)


def fd_check(f, *shapes, tol=1e-6):
    """Compare backward() grads against central differences for each input."""
    xs = [RNG.standard_normal(s) for s in shapes]
    for i in range(len(xs)):
        def loss(flat):
            args = [Tensor(x.copy()) for x in xs]
            args[i].data = flat.reshape(xs[i].shape)
            return float(T.tsum(f(*args)).data)

        fd = finite_difference_grad(loss, xs[i].ravel().copy()).reshape(xs[i].shape)
        args = [Tensor(x.copy(), requires_grad=True) for x in xs]
        T.tsum(f(*args)).backward()
        got = args[i].grad
        scale = max(np.abs(fd).max(), 1.0)
        assert np.abs(got - fd).max() / scale <= tol, f"input {i}: {np.abs(got - fd).max()}"


def test_tensor_promotes_non_float_input():
    assert Tensor(np.arange(4)).dtype == np.float64
    assert Tensor([True, False]).dtype == np.float64
    assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32


def test_add_mul_broadcast_grads():
    fd_check(lambda a, b: T.mul(T.add(a, b), a), (3, 4), (4,))
    fd_check(lambda a, b: T.add(a, T.mul(b, 2.0)), (2, 1, 5), (3, 5))


def test_div_neg_power():
    fd_check(lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)), (4,), (4,))
    fd_check(lambda a: T.power(T.add(T.mul(a, a), 1.0), 1.7), (5,))
    fd_check(T.neg, (3, 2))


def test_exp_log_sqrt():
    xs = np.abs(RNG.standard_normal((4, 3))) + 0.5
    t = Tensor(xs, requires_grad=True)
    T.tsum(T.log(T.sqrt(T.exp(t)))).backward()
    # d/dx log(sqrt(exp(x))) = 1/2
    assert np.allclose(t.grad, 0.5)


def test_sigmoid_bounds_and_grad():
    x = Tensor(np.array([-30.0, -1.0, 0.0, 1.0, 30.0]))
    y = T.sigmoid(x).data
    assert np.all(y > 0) and np.all(y < 1)
    assert abs(y[2] - 0.5) < 1e-15
    big = T.sigmoid(Tensor(np.array([-700.0, 700.0]))).data
    assert np.all(np.isfinite(big))
    fd_check(T.sigmoid, (6,))


def test_gelu_values_and_grad():
    # gelu(0) = 0; gelu(x) -> x for large x; -> 0 for very negative x
    y = T.gelu(Tensor(np.array([0.0, 10.0, -10.0]))).data
    assert abs(y[0]) < 1e-15
    assert abs(y[1] - 10.0) < 1e-8
    assert abs(y[2]) < 1e-8
    fd_check(T.gelu, (7,))


def test_clamp_max_subgradient():
    x = Tensor(np.array([0.0, 0.5, 1.0, 2.0]), requires_grad=True)
    T.tsum(T.clamp_max(x, 1.0)).backward()
    # zero at and beyond the bound, one below
    assert np.array_equal(x.grad, [1.0, 1.0, 0.0, 0.0])


def test_reverse_cumsum_values_and_grad():
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    assert np.array_equal(T.reverse_cumsum(x, axis=-1).data, [[6.0, 5.0, 3.0]])
    fd_check(lambda a: T.reverse_cumsum(a, axis=-1), (2, 5))
    fd_check(lambda a: T.reverse_cumsum(a, axis=0), (4, 3))


def test_reshape_transpose_getitem_concat():
    fd_check(lambda a: T.reshape(a, (6, 2)), (3, 4))
    fd_check(lambda a: T.transpose(a, (1, 0, 2)), (2, 3, 4))
    fd_check(lambda a: a[:, 1:3, :], (2, 4, 3))
    fd_check(lambda a, b: T.concat([a, b], axis=1), (2, 3, 4), (2, 2, 4))


def test_sum_mean_axes():
    fd_check(lambda a: T.tsum(a, axis=1), (3, 4, 2))
    fd_check(lambda a: T.tmean(a, axis=-1), (5, 3))
    x = Tensor(np.ones((2, 3)))
    assert float(T.tmean(x).data) == 1.0


def test_matmul_shapes_and_grads():
    fd_check(lambda a, b: T.matmul(a, b), (3, 4), (4, 5))
    fd_check(lambda a, b: T.matmul(a, b), (2, 3, 4), (4, 5))       # batched @ rank-2
    fd_check(lambda a, b: T.matmul(a, b), (2, 3, 4, 5), (2, 3, 5, 4))


def test_take_last_gather_and_scatter():
    x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
    idx = np.array([[0], [3], [1]])
    out = T.take_last(x, idx)
    assert np.array_equal(out.data.ravel(), [0.0, 7.0, 9.0])
    T.tsum(out).backward()
    expect = np.zeros((3, 4))
    expect[0, 0] = expect[1, 3] = expect[2, 1] = 1.0
    assert np.array_equal(x.grad, expect)


def test_take_last_repeated_indices_accumulate():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    out = T.take_last(x, np.array([[1, 1, 1]]))
    T.tsum(out).backward()
    assert np.array_equal(x.grad, [[0.0, 3.0, 0.0]])


def test_softmax_rows_and_grad():
    x = RNG.standard_normal((4, 6))
    p = T.softmax(Tensor(x), axis=-1).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p > 0)
    w = RNG.standard_normal((4, 6))
    fd_check(lambda a: T.mul(T.softmax(a, axis=-1), Tensor(w)), (4, 6))


def test_log_softmax_matches_log_of_softmax():
    x = RNG.standard_normal((3, 5))
    a = T.log_softmax(Tensor(x), axis=-1).data
    b = np.log(T.softmax(Tensor(x), axis=-1).data)
    assert np.abs(a - b).max() < 1e-12
    fd_check(lambda t: T.log_softmax(t, axis=-1), (3, 5))


def test_layer_norm_moments_and_grad():
    x = RNG.standard_normal((2, 5, 8))
    g = np.ones(8)
    b = np.zeros(8)
    y = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-12
    # the variance epsilon (1e-5) pulls the row spread slightly under 1
    assert np.abs(y.std(axis=-1) - 1.0).max() < 5e-5
    fd_check(lambda t, gg, bb: T.layer_norm(t, gg, bb), (2, 5, 8), (8,), (8,))


def test_pairwise_l2_properties_and_grad():
    v = RNG.standard_normal((2, 6, 4))
    d = T.pairwise_l2(Tensor(v)).data
    assert np.abs(d - d.swapaxes(-1, -2)).max() < 1e-12       # symmetric
    assert np.abs(np.diagonal(d, axis1=-2, axis2=-1)).max() == 0.0
    assert d.min() >= 0.0
    # spot-check one entry against the norm
    ref = np.linalg.norm(v[0, 1] - v[0, 4])
    assert abs(d[0, 1, 4] - ref) < 1e-12
    fd_check(lambda t: T.pairwise_l2(t), (3, 5), tol=1e-5)


def test_pairwise_l2_zero_distance_subgradient():
    # coincident points: gradient contribution is zero, not NaN
    v = Tensor(np.ones((3, 2)), requires_grad=True)
    T.tsum(T.pairwise_l2(v)).backward()
    assert np.all(np.isfinite(v.grad))
    assert np.abs(v.grad).max() == 0.0


def test_backward_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = T.add(T.mul(x, x), T.mul(x, 3.0))  # x^2 + 3x
    y.backward()
    assert np.allclose(x.grad, [7.0])


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.mul(x, 2.0)
    assert y.requires_grad is False
    y2 = T.mul(x, 2.0)
    assert y2.requires_grad is True


def test_grad_not_tracked_through_constants():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    out = T.tsum(T.mul(x, c))
    out.backward()
    assert c.grad is None
    assert np.array_equal(x.grad, np.ones(3))


def test_operator_sugar_matches_functions():
    a = Tensor(RNG.standard_normal((2, 3)))
    b = Tensor(RNG.standard_normal((2, 3)))
    assert np.array_equal((a + b).data, T.add(a, b).data)
    assert np.array_equal((a * b).data, T.mul(a, b).data)
    assert np.array_equal((-a).data, T.neg(a).data)


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = T.tsum(T.sigmoid(T.mul(x, 3.0)))
    y.backward()
    assert x.grad.dtype == np.float32
