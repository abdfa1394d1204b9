"""Autodiff core: gradient correctness against central finite differences,
fan-out accumulation, determinism, and shape failures."""

import numpy as np
import pytest

from patchcast.autodiff import Tensor, ShapeError, concat, finite_diff_check, no_grad


def test_square_forward_and_grad():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    assert y.data.item() == 9.0
    y.backward(np.array([1.0]))
    assert x.grad.item() == 6.0


def test_identity_matmul():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 5))
    out = Tensor(np.eye(5)) @ Tensor(a)
    assert np.array_equal(out.data, a)


def test_softmax_symmetry():
    out = Tensor(np.zeros((2, 3))).softmax(axis=-1)
    np.testing.assert_allclose(out.data, 1.0 / 3.0)


def test_constant_has_zero_grad():
    x = Tensor(np.array([2.0]), requires_grad=True)
    c = Tensor(np.array([7.0]))
    y = c * c + x  # x enters linearly; c is dead wrt x
    y.backward(np.array([1.0]))
    assert x.grad.item() == 1.0
    assert c.grad is None


def test_fanout_gradients_sum():
    x = Tensor(np.array([2.0]), requires_grad=True)
    shared = x * x
    y = shared + shared * 3.0
    y.backward(np.array([1.0]))
    assert x.grad.item() == pytest.approx(16.0)  # d(4x^2)/dx = 8x


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    w1 = rng.standard_normal((8, 4))
    w2 = rng.standard_normal((3, 8))
    x = rng.standard_normal((6, 4))

    def loss(w):
        h = (Tensor(x) @ w.transpose(1, 0)).silu()
        o = h @ Tensor(w2.T)
        return (o * o).mean()

    assert finite_diff_check(loss, w1, step=1e-4) <= 1e-5


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul", "exp", "log",
                                "sqrt", "arcsinh", "silu", "sigmoid", "softplus",
                                "softmax", "sum", "mean", "slice", "concat",
                                "masked_fill", "reshape", "transpose"])
def test_every_op_gradient(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((4, 5))
    positive = np.abs(a) + 0.5
    mask = rng.uniform(size=(4, 5)) < 0.3

    builders = {
        "add": (a, lambda t: (t + Tensor(b)).sum()),
        "sub": (a, lambda t: (t - Tensor(b)).sum()),
        "mul": (a, lambda t: (t * Tensor(b)).sum()),
        "div": (a, lambda t: (t / Tensor(positive)).sum()),
        "matmul": (a, lambda t: (t @ Tensor(b.T)).sum()),
        "exp": (a, lambda t: t.exp().sum()),
        "log": (positive, lambda t: t.log().sum()),
        "sqrt": (positive, lambda t: t.sqrt().sum()),
        "arcsinh": (a, lambda t: t.arcsinh().sum()),
        "silu": (a, lambda t: t.silu().sum()),
        "sigmoid": (a, lambda t: t.sigmoid().sum()),
        "softplus": (a, lambda t: t.softplus().sum()),
        "softmax": (a, lambda t: (t.softmax(axis=-1) * Tensor(b)).sum()),
        "sum": (a, lambda t: (t.sum(axis=0) * Tensor(b[0])).sum()),
        "mean": (a, lambda t: (t.mean(axis=1, keepdims=True) * Tensor(b[:, :1])).sum()),
        "slice": (a, lambda t: (t[1:3, ::2] * Tensor(b[1:3, ::2])).sum()),
        "concat": (a, lambda t: (concat([t, t * 2.0], axis=0) * Tensor(np.vstack([b, b]))).sum()),
        "masked_fill": (a, lambda t: (t.masked_fill(mask, -1.5) * Tensor(b)).sum()),
        "reshape": (a, lambda t: (t.reshape(2, 10) * Tensor(b.reshape(2, 10))).sum()),
        "transpose": (a, lambda t: (t.transpose(1, 0) * Tensor(b.T)).sum()),
    }
    point, fn = builders[op]
    assert finite_diff_check(fn, point, step=1e-6) <= 1e-5


def test_broadcasting_grads():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 1, 5))
    b = rng.standard_normal((4, 5))

    def fn(t):
        return ((t * Tensor(b)) + Tensor(b)).sum()

    assert finite_diff_check(fn, a, step=1e-6) <= 1e-8


def test_forward_deterministic():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 6))
    out1 = (Tensor(x).silu().softmax(axis=-1) @ Tensor(x)).sum()
    out2 = (Tensor(x).silu().softmax(axis=-1) @ Tensor(x)).sum()
    assert np.array_equal(out1.data, out2.data)


def test_matmul_shape_error_names_node():
    with pytest.raises(ShapeError, match="matmul"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_backward_requires_seed_shape():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = x * 2.0
    with pytest.raises(ShapeError):
        y.backward(np.ones(3))
    with pytest.raises(ShapeError):
        y.backward()  # non-scalar output without a seed


def test_no_grad_blocks_tape():
    with no_grad():
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * x
    assert not y.requires_grad
    assert y._backward is None


def test_finite_diff_check_exp_at_zero():
    # exp at 0, small step: derivative 1 recovered to high accuracy
    err = finite_diff_check(lambda t: t.exp().sum(), np.zeros(4), step=1e-5)
    assert err <= 1e-6


def test_finite_diff_check_linear_exact():
    c = np.array([2.0, -3.0, 0.5])
    err = finite_diff_check(lambda t: (t * Tensor(c)).sum(), np.ones(3), step=1e-3)
    assert err <= 1e-10


def test_pinball_op_values_and_grads():
    q = Tensor(np.array([0.0, 1.0, 1.0]), requires_grad=True)
    out = q.pinball(np.array([1.0, 0.0, 1.0]), 0.5)
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0])
    out.backward(np.ones(3))
    np.testing.assert_array_equal(q.grad, [-0.5, 0.5, 0.0])
