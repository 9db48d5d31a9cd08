import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgdiff import tensor as T
from sgdiff.gradcheck import grad_check, input_grad_check
from sgdiff.tensor import NonFiniteError, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False, width=64)


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    proj = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    assert np.array_equal(proj.data, [[5.0], [0.0]])


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_matches_triple_loop(a, b):
    with T.default_dtype(np.float64):
        got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, triple_loop_matmul(a, b), atol=1e-12)


def test_matmul_gradients():
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        assert grad_check(lambda: T.tsum(T.matmul(a, b) ** 2), [a, b]) < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50, width=64)))
def test_softmax_rows_are_distributions(x):
    with T.default_dtype(np.float64):
        p = T.softmax(Tensor(x), axis=-1).data
    assert (p >= 0).all() and (p <= 1).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    # 64-bit oracle with explicit max subtraction
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(p, e / e.sum(axis=-1, keepdims=True), atol=1e-12)


def test_masked_softmax_fully_masked_row_is_zero():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    mask = np.array([[True, False], [False, False]])
    out = T.masked_softmax(x, mask).data
    np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, 0.0]])


def test_layer_norm_examples():
    g, b = T.ones(4), T.zeros(4)
    assert np.array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), g, b).data, np.zeros((1, 4)))
    with T.default_dtype(np.float64):
        x = np.array([[1.0, -1.0]])
        out = T.layer_norm(Tensor(x), T.ones(2), T.zeros(2)).data
    # mean 0, variance 1 -> x / sqrt(1 + eps)
    np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5), atol=1e-12)


def test_gelu_examples_and_erf_oracle():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    xs = np.linspace(-6, 6, 41)
    with T.default_dtype(np.float64):
        got = T.gelu(Tensor(xs)).data
    oracle = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in xs]
    np.testing.assert_allclose(got, oracle, atol=1e-14)


def test_backward_examples():
    W = Tensor(np.zeros((2, 2)), requires_grad=True)
    T.tsum(W).backward()
    assert np.array_equal(W.grad, np.ones((2, 2)))
    W = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    (T.tsum(W * W) / 2).backward()
    np.testing.assert_allclose(W.grad, W.data)


def test_backward_requires_scalar():
    W = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (W * 2).backward()


def test_gradients_accumulate_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    T.tsum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_grad_check_on_linear_function_is_exact():
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(1)
        W = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        x = rng.standard_normal((4, 3))
        c = rng.standard_normal((4, 2))
        assert grad_check(lambda: T.tsum(T.matmul(Tensor(x), W) * c), [W]) < 1e-10


@pytest.mark.parametrize("op", [
    lambda x: T.exp(x), lambda x: T.log(T.exp(x) + 1.0), lambda x: T.sqrt(x * x + 1.0),
    lambda x: T.softmax(x, axis=0), lambda x: T.log_softmax(x, axis=-1), lambda x: T.l2_normalize(x),
    lambda x: T.mean(x, axis=0, keepdims=True), lambda x: T.transpose(x, (1, 0)),
    lambda x: T.roll(x, (1, -1), (0, 1)), lambda x: T.concat([x, x * 2.0], axis=1),
    lambda x: T.stack([x, x], axis=0), lambda x: T.split(x, [1, 3], axis=-1)[1],
    lambda x: T.index(x, (slice(None), [0, 0, 2])), lambda x: x / (x * x + 1.0),
    lambda x: T.power(x * x + 1.0, 1.5), lambda x: T.broadcast_to(x[None], (2, 3, 4)),
])
def test_primitive_gradients(op):
    x = np.random.default_rng(2).standard_normal((3, 4))
    with T.default_dtype(np.float64):
        proj = np.random.default_rng(3).standard_normal
        cache = {}

        def f(t):
            out = op(t)
            if out.shape not in cache:
                cache[out.shape] = proj(out.shape)
            return T.tsum(out * cache[out.shape])
        assert input_grad_check(f, x) < 1e-6


def test_broadcast_add_reduces_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    T.tsum(a + b).backward()
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])


def test_take_rows_scatters_gradient():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    T.tsum(T.take_rows(table, np.array([1, 1, 3]))).backward()
    np.testing.assert_allclose(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_cross_entropy_matches_manual():
    logits = np.array([[2.0, 0.5, -1.0], [0.1, 0.2, 0.3]])
    labels = np.array([0, 2])
    with T.default_dtype(np.float64):
        got = T.cross_entropy(Tensor(logits), labels).item()
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert abs(got - (-(lp[0, 0] + lp[1, 2]) / 2)) < 1e-12


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([-1.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_dtype_context_restores():
    before = T.get_default_dtype()
    with T.default_dtype(np.float64):
        assert Tensor([1]).dtype == np.float64
    assert T.get_default_dtype() == before


@settings(max_examples=30)
@given(arrays(np.float64, (2, 5), elements=finite), st.floats(0.1, 10))
def test_l2_normalize_scale_invariant(x, c):
    assume((np.linalg.norm(x, axis=-1) > 1e-2).all())
    with T.default_dtype(np.float64):
        a = T.l2_normalize(Tensor(x)).data
        b = T.l2_normalize(Tensor(x * c)).data
    np.testing.assert_allclose(a, b, atol=1e-6)
