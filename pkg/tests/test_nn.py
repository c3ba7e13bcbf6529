import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfaan.errors import InputTooShort, ShapeMismatch
from mfaan.nn import (AdamState, Conv1d, Dense, GlobalAvgPool, MaxPool1d, Module, Parameter, ReLU,
                      Sequential, adam_step, bce_loss, bce_with_logits, check_module,
                      conv1d_backward, conv1d_forward, grad_check, maxpool1d_backward,
                      maxpool1d_forward, relu_backward, relu_forward, sigmoid)


def naive_conv(x, w, b, stride):
    c_out, c_in, k = w.shape
    t_out = (x.shape[1] - k) // stride + 1
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for t in range(t_out):
            out[o, t] = b[o] + sum(w[o, c, j] * x[c, t * stride + j]
                                   for c in range(c_in) for j in range(k))
    return out


def conv64(c_in, c_out, k, stride=1, seed=0):
    layer = Conv1d(c_in, c_out, k, stride, rng=np.random.default_rng(seed)).astype(np.float64)
    layer.bias.value[:] = np.random.default_rng(seed + 1).standard_normal(c_out)
    return layer


# --- conv ---------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 9))
    out = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_hand_example():
    out = conv1d_forward(np.array([[[1.0, 2, 3, 4]]]), np.array([[[1.0, 0, -1]]]), np.zeros(1))
    np.testing.assert_array_equal(out, [[[-2.0, -2.0]]])


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -1.0, 2.0])
    w = np.random.default_rng(1).standard_normal((3, 2, 3))
    out = conv1d_forward(np.zeros((1, 2, 10)), w, b)
    np.testing.assert_array_equal(out[0], np.repeat(b[:, None], 8, axis=1))


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_matches_naive_loop(stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((2, 3, 11))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    out = conv1d_forward(x, w, b, stride)
    for i in range(2):
        np.testing.assert_allclose(out[i], naive_conv(x[i], w, b, stride), atol=1e-12)


def test_conv_errors():
    with pytest.raises(InputTooShort):
        conv1d_forward(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        conv1d_forward(np.zeros((1, 2, 5)), np.zeros((1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        conv1d_backward(np.zeros((1, 1, 5)), np.zeros((1, 1, 3)), np.zeros((1, 1, 4)))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((1, 2, 7)), rng.standard_normal((3, 2, 3))
    gx, gw, gb = conv1d_backward(x, w, np.zeros((1, 3, 5)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_identity_kernel():
    g = np.random.default_rng(3).standard_normal((1, 1, 6))
    gx, _, _ = conv1d_backward(np.zeros((1, 1, 6)), np.ones((1, 1, 1)), g)
    np.testing.assert_array_equal(gx, g)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_finite_differences(stride):
    layer = conv64(2, 3, 3, stride)
    x = np.random.default_rng(4).standard_normal((1, 2, 7))
    report = check_module(layer, x, tolerance=1e-4)
    assert report.passed, str(report)


def test_conv_is_linear_without_bias():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((3, 2, 3))
    x, y = rng.standard_normal((2, 1, 2, 9))
    a, b = 1.7, -0.3
    lhs = conv1d_forward(a * x + b * y, w, np.zeros(3))
    rhs = a * conv1d_forward(x, w, np.zeros(3)) + b * conv1d_forward(y, w, np.zeros(3))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# --- pooling ------------------------------------------------------------------

def test_maxpool_example_and_odd_tail():
    out, _ = maxpool1d_forward(np.array([[[1.0, 3, 2, 2, 9]]]))
    np.testing.assert_array_equal(out, [[[3.0, 2.0]]])


def test_maxpool_tie_routes_to_first():
    x = np.array([[[5.0, 5.0]]])
    _, mask = maxpool1d_forward(x)
    g = maxpool1d_backward(np.ones((1, 1, 1)), mask, 2)
    np.testing.assert_array_equal(g, [[[1.0, 0.0]]])


def test_maxpool_too_short():
    with pytest.raises(InputTooShort):
        maxpool1d_forward(np.zeros((1, 1, 1)))


@pytest.mark.parametrize("t", [6, 9])
def test_maxpool_finite_differences(t):
    # distinct values spaced well above the FD step so no perturbation flips a winner
    x = np.random.default_rng(t).permutation(2 * t).astype(float).reshape(1, 2, t) * 0.1
    assert check_module(MaxPool1d(), x, tolerance=1e-4).passed


def test_global_avg_pool():
    x = np.random.default_rng(6).standard_normal((1, 4, 1))
    np.testing.assert_array_equal(GlobalAvgPool().forward(x), x[..., 0])
    np.testing.assert_allclose(GlobalAvgPool().forward(np.full((2, 3, 5), 2.5)), 2.5)
    report = check_module(GlobalAvgPool(), np.random.default_rng(7).standard_normal((2, 3, 5)),
                          tolerance=1e-6)
    assert report.passed, str(report)


# --- dense / activations / loss ----------------------------------------------

def test_dense_identity():
    layer = Dense(4, 4, dtype=np.float64)
    layer.weight.value[:] = np.eye(4)
    x = np.random.default_rng(8).standard_normal((3, 4))
    np.testing.assert_array_equal(layer.forward(x), x)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Dense(4, 2, dtype=np.float64).forward(np.zeros((1, 5)))


def test_dense_passes_linear_tolerance():
    layer = Dense(5, 3, rng=np.random.default_rng(9), dtype=np.float64)
    report = check_module(layer, np.random.default_rng(10).standard_normal((2, 5)), tolerance=1e-7)
    assert report.passed, str(report)


def test_relu_and_derivative_at_zero():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu_forward(x), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(x, np.ones(3)), [0, 0, 1])


def test_sigmoid_symmetry():
    z = np.linspace(-30, 30, 301)
    assert sigmoid(0.0) == 0.5
    np.testing.assert_allclose(sigmoid(-z), 1 - sigmoid(z), atol=1e-12)
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))


def test_bce_values():
    assert bce_loss(0.0, 1) == pytest.approx(np.log(2), abs=1e-12)
    assert bce_loss(40.0, 1) < 1e-15
    assert bce_loss(-40.0, 1) == pytest.approx(40.0, rel=1e-12)
    assert np.isfinite(bce_loss(1e5, 0)) and np.isfinite(bce_loss(-1e5, 1))


@pytest.mark.parametrize("z", [-2.0, 0.0, 3.0])
@pytest.mark.parametrize("y", [0, 1])
def test_bce_gradient(z, y):
    h = 1e-5
    numeric = (bce_loss(z + h, y) - bce_loss(z - h, y)) / (2 * h)
    _, grad = bce_with_logits(np.float64(z), y)
    assert float(grad) == pytest.approx(numeric, abs=1e-6)


# --- adam ---------------------------------------------------------------------

def test_adam_zero_grad_is_noop():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    state = AdamState()
    for _ in range(5):
        adam_step([p], state)
    np.testing.assert_array_equal(p.value, [1.0, -2.0, 3.0])
    assert state.step == 5


def test_adam_first_step():
    p = Parameter(np.array([0.0]))
    p.grad[:] = 1.0
    adam_step([p], AdamState(lr=0.001))
    # m_hat = v_hat = 1, so the update is lr / (1 + eps)
    assert p.value[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_shape_mismatch():
    p = Parameter(np.zeros(3))
    state = AdamState(m=[np.zeros(2)], v=[np.zeros(2)])
    with pytest.raises(ShapeMismatch):
        adam_step([p], state)


def _run_adam(seed):
    rng = np.random.default_rng(seed)
    layer = Dense(6, 2, rng=rng)
    state = AdamState()
    x = rng.standard_normal((8, 6)).astype(np.float32)
    for _ in range(25):
        layer.zero_grad()
        out = layer.forward(x)
        layer.backward(out - 1.0)
        adam_step(layer.parameters(), state)
    return layer.weight.value.tobytes() + layer.bias.value.tobytes()


def test_adam_runs_are_bitwise_reproducible():
    assert _run_adam(3) == _run_adam(3)
    assert _run_adam(3) != _run_adam(4)


# --- grad check harness ------------------------------------------------------

class FlippedDense(Dense):
    def backward(self, grad_out):
        gx = super().backward(grad_out)
        self.weight.grad *= -1
        return gx


def test_grad_check_catches_flipped_sign():
    layer = FlippedDense(4, 3, rng=np.random.default_rng(11), dtype=np.float64)
    report = check_module(layer, np.random.default_rng(12).standard_normal((2, 4)))
    assert not report.passed
    assert report.errors["weight"] > 1.0
    assert report.errors["bias"] < 1e-7


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        check_module(Dense(2, 2, rng=np.random.default_rng(0)), np.zeros((1, 2), dtype=np.float32))


def test_grad_check_generic_callable():
    a = np.array([1.5, -0.5])
    state = {}

    def run():
        state["g"] = 2 * a
        return float(np.sum(a ** 2))

    report = grad_check(run, {"a": a}, lambda: {"a": state["g"]}, tolerance=1e-7)
    assert report.passed


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 10), st.integers(1, 3),
       st.integers(0, 10_000))
def test_conv_relu_pool_stack_gradients(c_in, c_out, t, k, seed):
    rng = np.random.default_rng(seed)
    net = Sequential(Conv1d(c_in, c_out, k, rng=rng), ReLU(), MaxPool1d(), GlobalAvgPool())
    net.astype(np.float64)
    if t - k + 1 < 2:
        return
    x = rng.standard_normal((2, c_in, t))
    report = check_module(net, x, tolerance=1e-4, seed=seed)
    assert report.passed, str(report)


def test_module_parameter_names():
    net = Sequential(Conv1d(1, 2, 3), ReLU(), Dense(2, 1))
    assert list(net.named_parameters()) == ["0.weight", "0.bias", "2.weight", "2.bias"]
    assert isinstance(net, Module)
