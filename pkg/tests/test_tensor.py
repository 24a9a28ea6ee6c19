import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tsvod import tensor as T
from tsvod.errors import ContractError, DimensionError, NumericError
from tsvod.gradcheck import check_gradient, run_gradcheck
from tsvod.tensor import Tape, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(data):
    return Tensor(data, requires_grad=True)


def grads_of(fn, *inputs):
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    return [x.grad for x in inputs]


def test_add_mul_matmul_hand_values():
    a = leaf([[1.0, 2.0], [3.0, 4.0]])
    b = leaf([[5.0, 6.0], [7.0, 8.0]])
    ga, gb = grads_of(lambda a, b: T.tsum(T.matmul(a, b)), a, b)
    # d sum(AB)/dA = 1 B^T, d/dB = A^T 1
    np.testing.assert_array_equal(ga, [[11.0, 15.0], [11.0, 15.0]])
    np.testing.assert_array_equal(gb, [[4.0, 4.0], [6.0, 6.0]])


def test_broadcast_gradient_reduces_to_input_shape():
    x = leaf(np.ones((4, 3)))
    b = leaf([1.0, 2.0, 3.0])
    _, gb = grads_of(lambda x, b: T.tsum(T.broadcast_add(x, b)), x, b)
    np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])


def test_shared_input_accumulates():
    x = leaf([2.0, -3.0])
    (g,) = grads_of(lambda x: T.tsum(T.mul(x, x)), x)
    np.testing.assert_array_equal(g, [4.0, -6.0])


def test_chain_rule_matches_jacobian_product():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(5)
    W = rng.standard_normal((3, 5))
    x = leaf(x0)
    (g,) = grads_of(lambda x: T.tsum(T.sigmoid(T.matmul(Tensor(W), T.reshape(x, (5, 1))))), x)
    s = 1 / (1 + np.exp(-(W @ x0)))
    np.testing.assert_allclose(g, W.T @ (s * (1 - s)), rtol=1e-12)


def test_gradients_accumulate_until_zeroed():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        with Tape() as tape:
            y = T.tsum(T.scale(x, 3.0))
        tape.backward(y)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_no_tape_means_no_recording():
    x = leaf([1.0, 2.0])
    y = T.exp(x)
    assert y.is_leaf and not y.requires_grad
    with pytest.raises(ContractError):
        y.backward()


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError, match="scalar"):
        tape.backward(y)
    with Tape() as other:
        z = T.tsum(x)
    with pytest.raises(ContractError):
        tape.backward(z)
    other.backward(z)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[4, 5\]"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_hadamard_requires_identical_shapes():
    with pytest.raises(DimensionError):
        T.hadamard(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))


def test_softmax_is_stable_for_large_inputs():
    x = Tensor([[1000.0, 1001.0, 1002.0]])
    p = T.softmax_rows(x).data
    np.testing.assert_allclose(p, T.softmax_rows(Tensor([[0.0, 1.0, 2.0]])).data, rtol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[0.0, np.inf]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 4), st.integers(2, 6)), elements=finite))
def test_softmax_gradient_sums_to_zero_per_row(x):
    # softmax is shift invariant along rows, so the gradient is orthogonal to 1
    t = leaf(x)
    w = np.arange(x.size, dtype=float).reshape(x.shape)
    (g,) = grads_of(lambda a: T.tsum(T.mul(T.softmax_rows(a), Tensor(w))), t)
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-9)


def test_layer_norm_output_is_normalised():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 16)) * 5 + 3)
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, rtol=1e-3)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ho, wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((3, ho, wo))
    for o in range(3):
        for i in range(ho):
            for j in range(wo):
                ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_fancy_slice_gradient_scatters_repeats():
    x = leaf(np.zeros((3, 2)))
    (g,) = grads_of(lambda a: T.tsum(T.slice_(a, np.array([0, 2, 0]))), x)
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_concat_and_reshape_round_trip():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 1)))
    c = T.concat([a, b], axis=1)
    assert c.shape == (2, 4)
    assert T.reshape(c, (8,)).shape == (8,)
    with pytest.raises(DimensionError):
        T.concat([a, Tensor(np.ones((3, 3)))], axis=1)


def test_log_is_floored_not_nan():
    assert np.isfinite(T.log(Tensor([0.0])).data).all()


def test_operator_sugar():
    a = leaf([[1.0, 2.0]])
    with Tape() as tape:
        y = T.tsum((a * 2.0 - 1.0) @ a.T)
    tape.backward(y)
    # y = 2 a.a - sum(a); dy/da = 4a - 1
    np.testing.assert_allclose(a.grad, [[3.0, 7.0]])


def test_check_gradient_catches_a_wrong_backward_rule():
    def bad_square(a):
        return T._result(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    x = leaf(np.random.default_rng(3).standard_normal(5))
    err = check_gradient(lambda: T.tsum(bad_square(x)), [x], np.random.default_rng(0))
    assert err > 0.1


def test_check_gradient_restores_inputs():
    x0 = np.random.default_rng(4).standard_normal((3, 3))
    x = leaf(x0)
    check_gradient(lambda: T.tsum(T.relu(x)), [x], np.random.default_rng(0))
    np.testing.assert_array_equal(x.data, x0)


def test_gradcheck_suite_is_deterministic_per_seed():
    names = [r.name for r in run_gradcheck(seed=3, probes=1)]
    assert "total_loss" in names and "model_end_to_end" in names


@pytest.mark.parametrize("x_shape", [(5, 4), (2, 5, 4)])
def test_fused_linear_is_bitwise_equal_to_the_composed_ops(x_shape):
    rng = np.random.default_rng(11)
    arrays_ = [rng.standard_normal(s) for s in (x_shape, (3, 4), (3,))]

    def run(layer):
        inputs = [leaf(a) for a in arrays_]
        with Tape() as tape:
            y = layer(*inputs)
            tape.backward(T.tsum(T.hadamard(y, y)))
        return [y.data] + [t.grad for t in inputs]

    fused = run(T.linear)
    composed = run(lambda x, w, b: T.broadcast_add(T.matmul(x, T.transpose(w)), b))
    for f, c in zip(fused, composed):
        assert np.array_equal(f, c)
    with pytest.raises(DimensionError):
        T.linear(leaf(arrays_[0]), leaf(np.ones((3, 5))), leaf(arrays_[2]))
