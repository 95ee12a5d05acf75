import numpy as np
import pytest

from orpdkit.nn.autodiff import Tensor, backward, graph_aggregate


def _fd_grad(fun, arr, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    grad = np.zeros_like(arr)
    flat = grad.ravel()
    base = arr.copy().ravel()
    for i in range(arr.size):
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        flat[i] = (fun(up.reshape(arr.shape)) - fun(dn.reshape(arr.shape))) / (2 * h)
    return grad


def _check(fun_tensor, arr, tol=1e-5):
    t = Tensor(arr)
    loss = fun_tensor(t)
    backward(loss)

    def scalar(a):
        return float(fun_tensor(Tensor(a)).value)

    fd = _fd_grad(scalar, arr)
    scale = max(np.max(np.abs(t.grad)), np.max(np.abs(fd)), 1e-12)
    assert np.max(np.abs(t.grad - fd)) / scale <= tol


def test_add_sub_mul_gradients():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    _check(lambda t: ((t + Tensor(b)) * (t - Tensor(b)) * t).sum(), a)


def test_broadcast_bias_gradient_sums_over_batch():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 3))
    bias = Tensor(rng.standard_normal(3))
    out = (Tensor(x) + bias).sum()
    backward(out)
    np.testing.assert_allclose(bias.grad, np.full(3, 5.0))


def test_matmul_gradient():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 2))
    _check(lambda t: ((t @ Tensor(w)) * (t @ Tensor(w))).sum(), a)
    _check(lambda t: ((Tensor(a) @ t) * (Tensor(a) @ t)).sum(), w)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 3))  # batch of node-feature blocks
    w = rng.standard_normal((3, 2))
    _check(lambda t: ((Tensor(x) @ t).tanh()).sum(), w)
    _check(lambda t: ((t @ Tensor(w)).tanh()).sum(), x)


def test_relu_and_tanh_gradients():
    rng = np.random.default_rng(4)
    # Keep points away from the relu kink where the derivative jumps.
    a = rng.standard_normal((6, 5))
    a[np.abs(a) < 0.05] = 0.1
    _check(lambda t: (t.relu() * t.relu()).sum(), a)
    _check(lambda t: t.tanh().sum(), a)


def test_reshape_and_scale_gradients():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((2, 6))
    _check(lambda t: (t.reshape(3, 4) * t.reshape(3, 4)).sum().scale(0.5), a)


def test_graph_aggregate_gradient_fast_and_exact():
    rng = np.random.default_rng(6)
    s = rng.uniform(0, 1, (5, 5))
    s = (s + s.T) / 2
    np.fill_diagonal(s, 0.0)
    h = rng.standard_normal((5, 3))
    _check(lambda t: (graph_aggregate(s, t) * graph_aggregate(s, t)).sum(), h)
    _check(lambda t: (graph_aggregate(s, t, exact=True) * graph_aggregate(s, t, exact=True)).sum(), h)


def test_graph_aggregate_exact_matches_fast_numerically():
    rng = np.random.default_rng(7)
    s = rng.uniform(0, 1, (6, 6))
    h = Tensor(rng.standard_normal((2, 6, 4)))
    fast = graph_aggregate(s, h).value
    exact = graph_aggregate(s, h, exact=True).value
    np.testing.assert_allclose(exact, fast, atol=1e-12)


def test_linear_least_squares_matches_normal_equation_gradient():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((12, 4))
    y = rng.standard_normal((12, 2))
    w = Tensor(rng.standard_normal((4, 2)))
    pred = Tensor(x) @ w
    diff = pred - Tensor(y)
    loss = (diff * diff).sum().scale(1.0 / y.size)
    backward(loss)
    closed_form = 2.0 / y.size * x.T @ (x @ w.value - y)
    np.testing.assert_allclose(w.grad, closed_form, rtol=1e-12, atol=1e-12)


def test_zero_loss_gives_zero_gradients():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 3))
    w = Tensor(rng.standard_normal((3, 2)))
    pred = Tensor(x) @ w
    diff = pred - Tensor(pred.value.copy())
    loss = (diff * diff).sum()
    backward(loss)
    np.testing.assert_array_equal(w.grad, np.zeros_like(w.value))


def test_single_linear_layer_matches_naive_matmul():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    out = (Tensor(x) @ Tensor(w) + Tensor(b)).value
    naive = np.empty((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[j]
            for k in range(4):
                acc += x[i, k] * w[k, j]
            naive[i, j] = acc
    np.testing.assert_allclose(out, naive, rtol=1e-12)


def test_reused_node_accumulates_gradient_once_per_path():
    a = Tensor(np.array([3.0]))
    y = a * a  # dy/da = 2a
    z = y * y  # dz/da = 4a^3
    backward(z)
    np.testing.assert_allclose(a.grad, [4 * 27.0])
