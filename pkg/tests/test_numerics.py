import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hybridhead.numerics import (
    ContractError,
    DegenerateRowError,
    RngStream,
    ShapeError,
    Tensor,
    backward,
    concat,
    cross_entropy,
    exp,
    log,
    matmul,
    no_grad,
    rms_norm,
    sigmoid,
    silu,
    softmax_rows,
    softplus,
    take_rows,
)

from conftest import finite_diff


def t(a, grad=True):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        assert np.array_equal(matmul(t(np.eye(3)), t(m)).data, m)

    def test_hand_values(self):
        out = matmul(t([[1, 2], [3, 4]]), t([[1], [1]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_grad_of_sum(self):
        rng = np.random.default_rng(0)
        a, b = t(rng.normal(size=(4, 5))), t(rng.normal(size=(5, 2)))
        backward(matmul(a, b).sum())
        assert np.allclose(a.grad, np.ones((4, 2)) @ b.data.T, rtol=0, atol=1e-14)
        fd = finite_diff(lambda: float((a.data @ b.data).sum()), a.data)
        assert np.max(np.abs(fd - a.grad) / np.abs(a.grad)) <= 1e-6

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(t(np.zeros((2, 3))), t(np.zeros((4, 5))))

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    def test_linearity(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (t(rng.normal(size=s), False) for s in ((m, k), (k, n), (k, n)))
        lhs = matmul(a, b + c).data
        rhs = (matmul(a, b) + matmul(a, c)).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-12


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax_rows(t([[0.0, 0.0, 0.0]])).data, 1 / 3, atol=1e-15)

    def test_stable(self):
        out = softmax_rows(t([[1000.0, 0.0]])).data
        assert np.isfinite(out).all() and out[0, 0] == 1.0 and out[0, 1] < 1e-300

    def test_values(self):
        out = softmax_rows(t([[1.0, 2.0, 3.0]])).data[0]
        assert np.allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)

    def test_mask_exact_zero(self):
        out = softmax_rows(t([[5.0, 1.0, 2.0]]), np.array([[True, False, True]])).data
        assert out[0, 1] == 0.0
        assert abs(out.sum() - 1) <= 1e-12

    def test_fully_masked_row_raises(self):
        with pytest.raises(DegenerateRowError):
            softmax_rows(t([[1.0, 2.0], [3.0, 4.0]]), np.array([[True, False], [False, False]]))

    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)),
           arrays(bool, (3, 6), elements=st.booleans()))
    def test_rows_sum_to_one(self, x, mask):
        mask[:, 0] = True
        out = softmax_rows(t(x), mask).data
        assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-12)
        assert np.all(out[~mask] == 0.0)

    def test_grad(self):
        rng = np.random.default_rng(1)
        x = t(rng.normal(size=(3, 4)))
        mask = np.tril(np.ones((3, 4), bool))
        w = rng.normal(size=(3, 4))
        backward((softmax_rows(x, mask) * Tensor(w)).sum())
        fd = finite_diff(lambda: float((softmax_rows(Tensor(x.data), mask).data * w).sum()), x.data)
        assert np.allclose(x.grad, fd, atol=1e-9)


class TestSoftplus:
    def test_values(self):
        out = softplus(t([0.0, 100.0, -3.0, 1000.0])).data
        assert abs(out[0] - np.log(2)) < 1e-15
        assert abs(out[1] - 100.0) < 1e-12
        assert abs(out[2] - 0.04859) < 5e-6
        assert out[3] == 1000.0


class TestBackward:
    def test_sum_gives_ones(self):
        p = t(np.random.default_rng(0).normal(size=(2, 3)))
        backward(p.sum())
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_square(self):
        p = t([1.0, -2.0])
        backward((p * p).sum())
        assert p.grad.tolist() == [2.0, -4.0]

    def test_accumulates(self):
        p = t([1.0, -2.0])
        backward((p * p).sum())
        backward((p * p).sum())
        assert p.grad.tolist() == [4.0, -8.0]

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            backward(t([1.0, 2.0]) * 2.0)

    def test_unused_parameter_grad_zero(self):
        a, b = t([1.0, 2.0]), t([3.0])
        loss = (a * a).sum()
        backward(loss)
        assert b.grad is None or np.all(b.grad == 0)

    def test_diamond_graph(self):
        x = t([3.0])
        y = x * x
        backward((y + y * x).sum())  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad.tolist() == [2 * 3 + 3 * 9]

    def test_no_grad_builds_no_graph(self):
        x = t([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad


def _compose(ops, x):
    y = x
    for op in ops:
        y = op(y)
    return y


_UNARY = [
    lambda y: y * y,
    lambda y: sigmoid(y),
    lambda y: silu(y),
    lambda y: softplus(y),
    lambda y: exp(y * 0.3),
    lambda y: log(y * y + 1.0),
    lambda y: y / (y * y + 2.0),
    lambda y: (y - 0.5) ** 2,
    lambda y: y.transpose(),
    lambda y: y.reshape(-1).reshape(y.shape) * 1.5,
]


@given(st.lists(st.integers(0, len(_UNARY) - 1), min_size=1, max_size=4),
       st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_random_compositions_match_fd(idx, m, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, n))
    w = rng.normal(size=(m, n))
    ops = [_UNARY[i] for i in idx]

    def f():
        y = _compose(ops, Tensor(x))
        return float((y.data * (w if y.shape == w.shape else w.T)).sum())

    xt = Tensor(x, requires_grad=True)
    y = _compose(ops, xt)
    backward((y * Tensor(w if y.shape == w.shape else w.T)).sum())
    fd = finite_diff(f, x)
    scale = np.maximum(np.abs(fd), 1.0)
    assert np.max(np.abs(xt.grad - fd) / scale) <= 1e-4


def test_broadcast_and_index_grads():
    rng = np.random.default_rng(3)
    a = t(rng.normal(size=(2, 3, 4)))
    g = t(rng.normal(size=(4,)))
    table = t(rng.normal(size=(5, 4)))
    ids = np.array([[0, 3, 3]])

    def loss_of(a_, g_, tab_):
        x = concat([rms_norm(a_, g_), take_rows(tab_, ids).reshape(1, 3, 4)], axis=0)
        return (x[:, 1:] * x[:, :-1]).sum()

    backward(loss_of(a, g, table))
    for param in (a, g, table):
        fd = finite_diff(lambda: float(loss_of(Tensor(a.data), Tensor(g.data), Tensor(table.data)).data), param.data)
        assert np.allclose(param.grad, fd, atol=1e-8)


def test_cross_entropy_weighted():
    rng = np.random.default_rng(4)
    logits = t(rng.normal(size=(2, 3, 5)))
    targets = np.array([[1, 2, 0], [4, 4, 3]])
    w = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    loss = cross_entropy(logits, targets, w)
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    ref = -(np.take_along_axis(lp, targets[..., None], -1)[..., 0] * w).sum() / w.sum()
    assert abs(float(loss.data) - ref) < 1e-13
    backward(loss)
    assert np.all(logits.grad[0, 1] == 0)
    fd = finite_diff(lambda: float(cross_entropy(Tensor(logits.data), targets, w).data), logits.data)
    assert np.allclose(logits.grad, fd, atol=1e-9)


class TestRng:
    def test_same_seed_same_draws(self):
        a, b = RngStream(7), RngStream(7)
        assert np.array_equal(a.normal((4, 4)), b.normal((4, 4)))

    def test_children_independent_of_order(self):
        a = RngStream(7)
        x = a.child("x").normal((3,))
        a.child("y").normal((3,))
        assert np.array_equal(x, RngStream(7).child("x").normal((3,)))
        assert not np.array_equal(x, RngStream(7).child("y").normal((3,)))

    def test_dtype(self):
        assert RngStream(1).normal((2,), dtype=np.float32).dtype == np.float32
