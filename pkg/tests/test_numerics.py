import numpy as np
import pytest
from conftest import PRIMITIVES, fd_check, primitive_arrays
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from swinkoa import numerics as nx
from swinkoa.numerics import DimensionError, Tensor

# hand-evaluated oracles, frozen
LN_123 = [-1.2247356859083902, 0.0, 1.2247356859083902]  # (x - 2) / sqrt(2/3 + 1e-5)
SOFTMAX_123 = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
GELU_1 = 0.8411919906082768  # tanh form at x = 1

finite = st.floats(-20, 20, allow_nan=False, width=32)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, b.data)


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ref = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_against_fd(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)))
    nx.backward(nx.tsum(a @ b))
    # d sum(AB) / dA = 1 B^T, checked by central differences at h = 1e-3
    for idx in np.ndindex(a.shape):
        num = nx.numeric_grad(lambda: nx.tsum(a @ b), a, idx, 1e-3)
        assert nx.rel_error(float(a.grad[idx]), num) < 1e-3


def test_softmax_uniform_and_formula():
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(4))).data, [0.25] * 4, atol=1e-7)
    np.testing.assert_allclose(nx.softmax(Tensor([1.0, 2.0, 3.0])).data, SOFTMAX_123, atol=1e-6)


@given(arrays(np.float32, (3, 6), elements=finite), st.floats(-50, 50, width=32))
def test_softmax_shift_invariance(x, c):
    a = nx.softmax(Tensor(x)).data
    b = nx.softmax(Tensor(x + np.float32(c))).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_nan_propagates():
    out = nx.softmax(Tensor([1.0, np.nan, 0.0])).data
    assert np.isnan(out).all()


def test_softmax_other_axis(rng):
    x = rng.normal(size=(4, 3, 5))
    np.testing.assert_allclose(nx.softmax(Tensor(x), axis=1).data.sum(axis=1), 1.0, atol=1e-6)


def test_layer_norm_cases():
    ones, zeros = np.ones(3), np.zeros(3)
    np.testing.assert_array_equal(nx.layer_norm(Tensor([[5.0, 5.0, 5.0]]), ones, zeros).data, 0.0)
    np.testing.assert_allclose(nx.layer_norm(Tensor([[1.0, 2.0, 3.0]]), ones, zeros).data[0], LN_123, atol=1e-6)
    beta = np.array([0.5, -1.0, 2.0])
    out = nx.layer_norm(Tensor([[1.0, 7.0, -3.0]]), zeros, beta).data
    np.testing.assert_allclose(out[0], beta, atol=1e-7)


def test_layer_norm_bad_affine_shape():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.ones((2, 3))), np.ones(4), np.zeros(4))


def test_activations():
    assert nx.gelu(Tensor([0.0])).data[0] == 0.0
    assert nx.gelu(Tensor([1.0])).data[0] == pytest.approx(GELU_1, abs=1e-6)
    np.testing.assert_array_equal(nx.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])


def test_mean_pool_identical_tokens():
    tok = np.array([0.5, -2.0, 3.0])
    np.testing.assert_allclose(nx.mean_pool(Tensor(np.stack([tok, tok]))).data, tok, atol=1e-7)


def test_square_grad():
    x = Tensor([3.0], requires_grad=True)
    nx.backward(nx.tsum(x * x))
    fd = ((3.001**2) - (2.999**2)) / 0.002
    assert x.grad[0] == pytest.approx(6.0, abs=1e-5)
    assert fd == pytest.approx(6.0, abs=1e-9)


def test_backward_twice_accumulates(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4)))
    x.zero_grad()
    nx.backward(nx.tsum(nx.gelu(x @ w)))
    first = x.grad.copy()
    nx.backward(nx.tsum(nx.gelu(x @ w)))
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nx.backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_broadcast_grad_reduces(rng):
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    nx.backward(nx.tsum(x + b))
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


# ---------------------------------------------------------------------------
# every primitive against finite differences, relative error < 1e-3
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    build, arrays_ = primitive_arrays(name, rng)
    assert fd_check(build, arrays_, rng) < 1e-3


@given(arrays(np.float32, (4,), elements=st.floats(-80, 80, width=32)),
       arrays(np.int8, (4,), elements=st.integers(0, 1)))
def test_bce_stays_finite(z, t):
    loss = nx.bce_with_logits(Tensor(z), t).data
    assert np.isfinite(loss).all() and (loss >= 0).all()


def test_bce_matches_naive_formula(rng):
    z = rng.normal(size=6)
    t = rng.integers(0, 2, 6)
    p = 1 / (1 + np.exp(-z))
    ref = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    np.testing.assert_allclose(nx.bce_with_logits(Tensor(z), t).data, ref, atol=1e-6)
