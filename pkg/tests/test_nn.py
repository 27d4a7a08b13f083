import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skywatch.exceptions import ConfigError, DimensionError, StateError
from skywatch.nn import (LSTM, AdamState, Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU,
                         Sequential, adam_step, backward, check_gradients, load_checkpoint,
                         mse_loss, save_checkpoint, softmax)


def naive_matmul(x, w):
    n, k = x.shape
    m = w.shape[1]
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += x[i, t] * w[t, j]
            out[i][j] = s
    return np.array(out)


def scalar_sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_lstm_step(x, w, b, hidden):
    """One LSTM step from zero state, computed element by element."""
    z = list(x) + [0.0] * hidden
    gates = {}
    for g in "ifog":
        vals = []
        for j in range(hidden):
            s = b[g][j]
            for r, zr in enumerate(z):
                s += zr * w[g][r, j]
            vals.append(scalar_sigmoid(s) if g != "g" else math.tanh(s))
        gates[g] = vals
    c = [gates["i"][j] * gates["g"][j] for j in range(hidden)]
    return np.array([gates["o"][j] * math.tanh(c[j]) for j in range(hidden)])


# ---- dense ---------------------------------------------------------------

def test_dense_identity_weights():
    layer = Dense(2, 2, "identity")
    layer.params["W"][:] = np.eye(2)
    np.testing.assert_array_equal(layer.forward([[3.0, 4.0]]), [[3.0, 4.0]])


def test_dense_relu_clips():
    layer = Dense(2, 1, "relu")
    layer.params["W"][:] = [[1.0], [1.0]]
    layer.params["b"][:] = [-10.0]
    np.testing.assert_array_equal(layer.forward([[2.0, 3.0]]), [[0.0]])


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(7)
    layer = Dense(5, 3, "identity", rng=rng)
    layer.params["b"][:] = rng.normal(size=3)
    x = rng.normal(size=(4, 5))
    expected = naive_matmul(x, layer.params["W"]) + layer.params["b"]
    np.testing.assert_allclose(layer.forward(x), expected, rtol=0, atol=1e-12)


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        Dense(3, 2).forward(np.ones((1, 4)))


# ---- softmax --------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax([[0.0, 0.0]]), [[0.5, 0.5]])


def test_softmax_large_logit_is_stable():
    out = softmax([[1000.0, 0.0]])
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 1.0 and out[0, 1] < 1e-300


def test_softmax_extended_precision_oracle():
    getcontext().prec = 50
    exps = [Decimal(v).exp() for v in (1, 2, 3)]
    total = sum(exps)
    expected = [float(e / total) for e in exps]
    np.testing.assert_allclose(softmax([[1.0, 2.0, 3.0]])[0], expected, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, shift):
    p = softmax(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    q = softmax(x + shift)
    np.testing.assert_array_equal(p.argmax(axis=1), q.argmax(axis=1))
    np.testing.assert_allclose(p, q, atol=1e-12)


# ---- dropout ---------------------------------------------------------------

def test_dropout_zero_rate_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    out = Dropout(0.0).forward(x, training=True, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(out, x)


def test_dropout_eval_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(Dropout(0.5).forward(x, training=False), x)


def test_dropout_mean_preserved():
    out = Dropout(0.5).forward(np.ones(10000), training=True, rng=np.random.default_rng(42))
    assert 0.97 <= out.mean() <= 1.03


def test_dropout_expectation_elementwise():
    rate, n_masks = 0.3, 10000
    layer = Dropout(rate)
    rng = np.random.default_rng(5)
    x = np.full((n_masks, 6), 2.0)
    out = layer.forward(x, training=True, rng=rng)
    mean = out.mean(axis=0)
    # each sample is 2/(1-r) with prob 1-r else 0
    se = 2.0 / (1 - rate) * math.sqrt(rate * (1 - rate) / n_masks)
    assert np.all(np.abs(mean - 2.0) <= 3 * se)


def test_dropout_invalid_rate():
    with pytest.raises(ConfigError):
        Dropout(1.0)


# ---- LSTM ------------------------------------------------------------------

def test_lstm_zero_network_outputs_zero():
    cell = LSTM(3, 5, zero_init=True)
    x = np.random.default_rng(0).normal(size=(2, 4, 3))
    np.testing.assert_array_equal(cell.forward(x), np.zeros((2, 5)))


def test_lstm_single_step_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    cell = LSTM(3, 4, rng=rng)
    for g in "ifog":
        cell.params[f"b_{g}"][:] = rng.normal(size=4)
    x = rng.normal(size=(1, 1, 3))
    w = {g: cell.params[f"W_{g}"] for g in "ifog"}
    b = {g: cell.params[f"b_{g}"] for g in "ifog"}
    expected = scalar_lstm_step(x[0, 0], w, b, 4)
    np.testing.assert_allclose(cell.forward(x)[0], expected, rtol=0, atol=1e-12)


def test_lstm_forget_bias_init():
    cell = LSTM(2, 3)
    np.testing.assert_array_equal(cell.params["b_f"], np.ones(3))


def test_lstm_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    net = Sequential([LSTM(3, 6, rng=rng), Dense(6, 2, rng=rng)])
    x = rng.normal(size=(4, 5, 3))
    y = rng.normal(size=(4, 2))
    res = check_gradients(net, x, lambda out: mse_loss(out, y), n_samples=100, rng=rng)
    assert res["max_rel_error"] <= 1e-4


# ---- backward --------------------------------------------------------------

def test_linear_closed_form_gradient():
    rng = np.random.default_rng(2)
    layer = Dense(3, 2)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 2))
    out = layer.forward(x)
    _, g = mse_loss(out, y)
    grads = backward(layer, g)
    # mse averages over batch*out elements
    expected = 2.0 * x.T @ (x @ layer.params["W"] - y) / y.size
    np.testing.assert_allclose(grads["W"], expected, atol=1e-12)


def test_backward_before_forward_is_state_error():
    with pytest.raises(StateError):
        Dense(2, 2).backward(np.ones((1, 2)))
    with pytest.raises(StateError):
        Sequential([Dense(2, 2)]).backward(np.ones((1, 2)))


def test_mixed_stack_gradients():
    rng = np.random.default_rng(11)
    net = Sequential([Conv2D(2, 3, 3, rng=rng), ReLU(), MaxPool2D(), Flatten(),
                      Dense(12, 4, "tanh", rng=rng), Dense(4, 3, "softmax", rng=rng)])
    x = rng.normal(size=(2, 2, 4, 4))
    y = rng.normal(size=(2, 3))
    res = check_gradients(net, x, lambda out: mse_loss(out, y), n_samples=100, rng=rng)
    assert res["max_rel_error"] <= 1e-4


def test_dropout_stack_gradients_with_frozen_mask():
    rng = np.random.default_rng(11)
    net = Sequential([Dense(6, 8, "tanh", rng=rng), Dropout(0.3), Dense(8, 2, rng=rng)])
    x = rng.normal(size=(5, 6))
    y = rng.normal(size=(5, 2))
    res = check_gradients(net, x, lambda out: mse_loss(out, y), n_samples=100, rng=rng,
                          training=True)
    assert res["max_rel_error"] <= 1e-4


def test_eval_forward_bit_identical():
    rng = np.random.default_rng(0)
    net = Sequential([Dense(4, 5, "relu", rng=rng), Dropout(0.5), Dense(5, 2, rng=rng)])
    x = rng.normal(size=(3, 4))
    assert np.array_equal(net.forward(x), net.forward(x))


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-1e3, 1e3)))
def test_forward_backward_finite_on_bounded_inputs(x):
    rng = np.random.default_rng(0)
    net = Sequential([LSTM(4, 5, rng=rng), Dense(5, 3, "relu", rng=rng)])
    out = net.forward(x)
    assert np.all(np.isfinite(out))
    dx = net.backward(np.ones_like(out))
    assert np.all(np.isfinite(dx))


# ---- adam ------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    adam_step(AdamState(), [p], [np.zeros(2)])
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_size():
    p = np.array([0.0])
    adam_step(AdamState(learning_rate=0.001), [p], [np.array([1.0])])
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_minimises_quadratic():
    w = np.array([0.0])
    state = AdamState(learning_rate=0.1)
    for _ in range(100):
        adam_step(state, [w], [2.0 * (w - 3.0)])
    assert abs(w[0] - 3.0) < 0.5
    assert state.step == 100


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(AdamState(), [np.zeros(2)], [np.zeros(3)])


# ---- checkpoint ------------------------------------------------------------

def test_checkpoint_roundtrip_is_byte_stable(tmp_path):
    rng = np.random.default_rng(4)
    tensors = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
    p1 = save_checkpoint(tmp_path / "one.ckpt", {"kind": "x"}, tensors, {"seed": 1})
    p2 = save_checkpoint(tmp_path / "two.ckpt", {"kind": "x"}, tensors, {"seed": 1})
    assert p1.read_bytes() == p2.read_bytes()
    arch, loaded, meta = load_checkpoint(p1)
    assert arch == {"kind": "x"} and meta == {"seed": 1}
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])
