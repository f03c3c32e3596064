import numpy as np
import pytest

from editfix import tensor as T
from editfix.tensor import (
    AutodiffError,
    NumericError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    no_grad,
)
from helpers import gradcheck


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_softmax_uniform_on_equal_logits():
    for n in (1, 2, 7):
        y = T.softmax(Tensor(np.zeros((1, n)))).data
        np.testing.assert_allclose(y, np.full((1, n), 1.0 / n), rtol=1e-15)


def test_softmax_sums_to_one(rng):
    x = Tensor(rng.normal(size=(5, 4, 9)))
    y = T.softmax(x, axis=-1).data
    assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-12
    assert (y >= 0).all()
    y2 = T.softmax(x, axis=1).data
    assert np.abs(y2.sum(axis=1) - 1.0).max() < 1e-12


def test_softmax_overflow_stability():
    y = T.softmax(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.isfinite(y).all() and abs(y[0, 0] - 1.0) < 1e-12


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(3, 6))
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + 123.456)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_masked_fill_then_softmax_exact_zero(rng):
    x = Tensor(rng.normal(size=(4, 6)))
    mask = np.zeros((4, 6), dtype=bool)
    mask[:, 2] = True
    y = T.softmax(T.masked_fill(x, mask, -np.inf)).data
    assert (y[:, 2] == 0.0).all()
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12


def test_cross_entropy_uniform_two_way():
    loss = T.cross_entropy(Tensor(np.zeros(2)), 0)
    assert abs(loss.item() - np.log(2.0)) < 1e-12


def test_cross_entropy_closed_form_gradient(rng):
    logits = Parameter("l", rng.normal(size=(5, 8)))
    targets = rng.integers(0, 8, size=5)
    loss = T.mean_(T.cross_entropy(logits, targets))
    backward(loss)
    p = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    onehot = np.zeros((5, 8))
    onehot[np.arange(5), targets] = 1.0
    np.testing.assert_allclose(logits.grad, (p - onehot) / 5, atol=1e-12)


def test_cross_entropy_rejects_nan_and_masked_target():
    with pytest.raises(NumericError):
        T.cross_entropy(Tensor(np.array([np.nan, 0.0])), 0)
    with pytest.raises(NumericError):
        T.cross_entropy(Tensor(np.array([-np.inf, 0.0])), 0)
    # -inf in a non-target slot is legal masking
    loss = T.cross_entropy(Tensor(np.array([0.0, -np.inf])), 0)
    assert loss.item() == 0.0


def test_backward_requires_scalar(rng):
    p = Parameter("p", rng.normal(size=(3,)))
    with pytest.raises(AutodiffError):
        backward(T.scale(p, 2.0))


def test_sum_gradient_is_ones(rng):
    p = Parameter("p", rng.normal(size=(4, 3)))
    backward(T.sum_(p))
    np.testing.assert_array_equal(p.grad, np.ones((4, 3)))


def test_gradients_accumulate_without_zeroing(rng):
    p = Parameter("p", rng.normal(size=(3,)))
    backward(T.sum_(p))
    g1 = p.grad.copy()
    backward(T.sum_(p))
    np.testing.assert_allclose(p.grad, 2 * g1)


def test_detached_tensor_gets_no_gradient(rng):
    p = Parameter("p", rng.normal(size=(3,)))
    d = p.detach()
    loss = T.sum_(T.add(p, d))
    backward(loss)
    np.testing.assert_array_equal(p.grad, np.ones(3))
    assert d.grad is None


def test_no_grad_suppresses_graph(rng):
    p = Parameter("p", rng.normal(size=(3,)))
    with no_grad():
        out = T.scale(p, 3.0)
    assert out._parents == () and not out.requires_grad


def test_shape_errors_name_both_shapes(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(5, 4)))
    with pytest.raises(ShapeError, match=r"3, 4"):
        T.add(a, b)
    with pytest.raises(ShapeError, match=r"5, 4"):
        T.matmul(a, b)


def test_add_trailing_broadcast_gradient(rng):
    a = Parameter("a", rng.normal(size=(4, 5, 6)))
    bias = Parameter("b", rng.normal(size=(6,)))
    backward(T.sum_(T.add(a, bias)))
    np.testing.assert_allclose(bias.grad, np.full(6, 20.0))


# Finite-difference checks for every differentiable op (double precision,
# h = 1e-5, tolerance 1e-4).
FD_TOL = 1e-4
FD_H = 1e-5


def test_fd_matmul_2d_and_batched(rng):
    a = Parameter("a", rng.normal(size=(3, 4)))
    w = Parameter("w", rng.normal(size=(4, 5)))
    r1 = rng.normal(size=(3, 5))
    assert gradcheck(lambda: T.sum_(T.scale(T.matmul(a, w), r1)), [a, w], h=FD_H) < FD_TOL

    ab = Parameter("ab", rng.normal(size=(2, 3, 4)))
    bb = Parameter("bb", rng.normal(size=(2, 4, 3)))
    r2 = rng.normal(size=(2, 3, 3))
    assert gradcheck(lambda: T.sum_(T.scale(T.matmul(ab, bb), r2)), [ab, bb], h=FD_H) < FD_TOL


def test_fd_gelu(rng):
    a = Parameter("a", rng.normal(size=(6, 5)))
    r = rng.normal(size=(6, 5))
    assert gradcheck(lambda: T.sum_(T.scale(T.gelu(a), r)), [a], h=FD_H) < FD_TOL


def test_fd_layer_norm(rng):
    x = Parameter("x", rng.normal(size=(7, 8)))
    g = Parameter("g", rng.normal(1.0, 0.2, size=8))
    b = Parameter("b", rng.normal(0.0, 0.2, size=8))
    r = rng.normal(size=(7, 8))
    assert gradcheck(lambda: T.sum_(T.scale(T.layer_norm(x, g, b), r)), [x, g, b], h=FD_H) < FD_TOL


def test_fd_softmax_with_mask(rng):
    x = Parameter("x", rng.normal(size=(5, 7)))
    mask = rng.random((5, 7)) < 0.25
    mask[:, 0] = False  # keep one live column per row
    r = rng.normal(size=(5, 7))

    def loss():
        return T.sum_(T.scale(T.softmax(T.masked_fill(x, mask, -np.inf)), r))

    assert gradcheck(loss, [x], h=FD_H) < FD_TOL


def test_fd_embedding_gather(rng):
    table = Parameter("t", rng.normal(size=(6, 4)))
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    r = rng.normal(size=(2, 3, 4))
    assert gradcheck(lambda: T.sum_(T.scale(T.embedding_gather(table, ids), r)), [table], h=FD_H) < FD_TOL


def test_fd_concat_slice_reshape_transpose(rng):
    a = Parameter("a", rng.normal(size=(3, 4)))
    b = Parameter("b", rng.normal(size=(2, 4)))
    r = rng.normal(size=(4, 2, 2))

    def loss():
        c = T.concat([a, b], axis=0)          # (5, 4)
        s = c[(slice(1, 5), slice(0, 4))]      # (4, 4)
        t = T.transpose(T.reshape(s, (4, 2, 2)), (0, 2, 1))
        return T.sum_(T.scale(t, r))

    assert gradcheck(loss, [a, b], h=FD_H) < FD_TOL


def test_fd_cross_entropy(rng):
    logits = Parameter("l", rng.normal(size=(6, 5)))
    targets = rng.integers(0, 5, size=6)
    assert gradcheck(lambda: T.mean_(T.cross_entropy(logits, targets)), [logits], h=FD_H) < FD_TOL


def test_fd_scale_add_sum_mean(rng):
    a = Parameter("a", rng.normal(size=(4, 3)))
    b = Parameter("b", rng.normal(size=(3,)))
    c = rng.normal(size=(4, 3))

    def loss():
        return T.mean_(T.sum_(T.scale(T.add(a, b), c), axis=1))

    assert gradcheck(loss, [a, b], h=FD_H) < FD_TOL
