"""
Tests for the tensor/tape autodiff core
Analytic gradients are compared with central finite differences in float64
"""

import numpy as np
import pytest

from service.errors import ContractError, DimensionError
from service.tensor import (
    RngStreams,
    Tape,
    Tensor,
    add,
    concatenate,
    constant,
    cross_entropy,
    dropout,
    embedding,
    expand,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    select,
    softmax,
    sub,
    sum_all,
    transpose,
)

EPS = 1e-3
TOL = 1e-3


def _weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return sum_all(mul(out, constant(weights, dtype=out.dtype)))


def _check_gradients(build, inputs, eps=EPS, tol=TOL):
    """Compare tape gradients of build(*inputs) -> scalar with central differences"""
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = build(*inputs)
    tape.backward(loss)
    for t in inputs:
        analytic = t.grad
        numeric = np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            original = t.data[idx]
            t.data[idx] = original + eps
            plus = build(*inputs).item()
            t.data[idx] = original - eps
            minus = build(*inputs).item()
            t.data[idx] = original
            numeric[idx] = (plus - minus) / (2 * eps)
        error = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        assert error.max() < tol, f"max relative error {error.max():.2e}"


def _rand(*shape, seed=0, **kwargs) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True, dtype=np.float64, **kwargs)


# matmul


def test_matmul_identity():
    out = matmul(constant(np.eye(2)), constant([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_row_times_column():
    assert matmul(constant([[1.0, 2.0]]), constant([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    a, b = _rand(3, 4, seed=1), _rand(4, 2, seed=2)
    _check_gradients(lambda a, b: sum_all(matmul(a, b)), [a, b])


def test_matmul_batched_gradient_with_shared_weight():
    a, b = _rand(2, 3, 4, seed=1), _rand(4, 2, seed=2)
    _check_gradients(lambda a, b: _weighted_sum(matmul(a, b)), [a, b])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        matmul(constant(np.zeros((2, 3))), constant(np.zeros((4, 5))))
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)


# softmax


def test_softmax_uniform_input():
    np.testing.assert_allclose(softmax(constant([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_is_stable_for_large_inputs():
    out = softmax(constant(np.array([1000.0, 0.0, -1000.0], dtype=np.float32))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-6)


def test_softmax_gradient():
    _check_gradients(lambda x: _weighted_sum(softmax(x)), [_rand(5, seed=4)])


# backward


def test_backward_of_sum_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_accumulates_over_reuse():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    c = constant(np.array([2.0, 3.0, 4.0], dtype=np.float32))
    with Tape() as tape:
        loss = sum_all(mul(add(x, x), c))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [4, 6, 8])


def test_backward_rejects_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_tapes_are_single_shot():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_nothing_is_recorded_without_a_tape():
    x = Tensor([1.0], requires_grad=True)
    assert not add(x, x).requires_grad


# Other differentiable ops


def test_elementwise_gradients_with_leading_broadcast():
    a, b = _rand(2, 3, seed=1), _rand(3, seed=2)
    _check_gradients(lambda a, b: _weighted_sum(add(a, b)), [a, b])
    _check_gradients(lambda a, b: _weighted_sum(sub(a, b)), [a, b])
    _check_gradients(lambda a, b: _weighted_sum(mul(a, b)), [a, b])


def test_broadcast_beyond_leading_dims_is_rejected():
    with pytest.raises(DimensionError):
        add(constant(np.zeros((3, 1))), constant(np.zeros((3, 4))))


def test_relu_gradient_away_from_kink():
    data = np.array([[-1.5, 0.7, 2.0], [0.3, -0.4, 1.1]])
    _check_gradients(lambda x: _weighted_sum(relu(x)), [Tensor(data, requires_grad=True, dtype=np.float64)])


def test_shape_op_gradients():
    x = _rand(2, 3, 4, seed=5)
    _check_gradients(lambda x: _weighted_sum(reshape(x, (6, 4))), [x])
    _check_gradients(lambda x: _weighted_sum(transpose(x, (2, 0, 1))), [x])
    _check_gradients(lambda x: _weighted_sum(select(x, axis=1, index=2)), [x])


def test_concatenate_gradient():
    a, b = _rand(2, 3, seed=1), _rand(2, 2, seed=2)
    _check_gradients(lambda a, b: _weighted_sum(concatenate([a, b], axis=1)), [a, b])


def test_expand_gradient_sums_broadcast_axes():
    g = _rand(3, 1, 1, seed=6)
    _check_gradients(lambda g: _weighted_sum(expand(g, (3, 2, 4))), [g])


def test_log_softmax_gradient():
    _check_gradients(lambda x: _weighted_sum(log_softmax(x)), [_rand(2, 5, seed=7)])


def test_embedding_gradient_scatter_adds_repeated_ids():
    weight = _rand(5, 3, seed=8)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    _check_gradients(lambda w: _weighted_sum(embedding(w, ids)), [weight])


def test_layer_norm_gradient():
    x, gamma, beta = _rand(2, 3, 4, seed=9), _rand(4, seed=10), _rand(4, seed=11)
    _check_gradients(lambda x, g, b: _weighted_sum(layer_norm(x, g, b)), [x, gamma, beta])


def test_dropout_gradient_with_fixed_mask():
    x = _rand(3, 4, seed=12)
    _check_gradients(lambda x: _weighted_sum(dropout(x, 0.3, np.random.default_rng(0), True)), [x])


def test_cross_entropy_gradient_with_smoothing():
    logits = _rand(2, 3, 5, seed=13)
    targets = np.array([[1, 0, 4], [2, 2, 0]])
    weights = np.array([[0.2, 0.3, 0.0], [0.1, 0.2, 0.2]])
    _check_gradients(lambda z: cross_entropy(z, targets, weights, smoothing=0.1), [logits])


# Dropout and randomness


def test_dropout_eval_mode_is_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert dropout(x, 0.5, None, train_mode=False) is x


def test_dropout_train_mode_scales_kept_units():
    x = Tensor(np.ones((100, 100)))
    out = dropout(x, 0.25, np.random.default_rng(1), train_mode=True).data
    assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.75)}


def test_dropout_requires_a_generator_in_train_mode():
    with pytest.raises(ContractError):
        dropout(Tensor(np.ones(3)), 0.1, None, train_mode=True)


def test_rng_streams_are_reproducible_and_independent():
    a, b = RngStreams(7), RngStreams(7)
    np.testing.assert_array_equal(a.dropout(3).random(5), b.dropout(3).random(5))
    a.mask.random(100)
    np.testing.assert_array_equal(a.dropout(4).random(5), b.dropout(4).random(5))
    assert not np.array_equal(a.dropout(1).random(5), a.dropout(2).random(5))
