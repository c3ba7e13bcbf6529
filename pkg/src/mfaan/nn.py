"""A small numpy neural-network engine with hand-written backward passes.

Activations are plain ndarrays laid out [batch, channels, time] (or
[batch, features] after pooling). Trainable weights live in `Parameter`
objects, which carry the value and its accumulated gradient side by side.
Each layer caches what its backward pass needs during `forward`, so a
layer instance must not be shared between two interleaved forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .errors import InputTooShort, ShapeMismatch


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype})"


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# functional kernels

def _windows(x: np.ndarray, kernel_size: int, stride: int) -> np.ndarray:
    # [B, C, T] -> [B, T_out, C, K]
    w = np.lib.stride_tricks.sliding_window_view(x, kernel_size, axis=2)[:, :, ::stride]
    return w.transpose(0, 2, 1, 3)


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid 1-D cross-correlation.

    x: [B, C_in, T], w: [C_out, C_in, K], b: [C_out] -> [B, C_out, T_out]
    with out[o, t] = b[o] + sum_{c,k} w[o, c, k] * x[c, t*stride + k].
    """
    n_batch, c_in, t = x.shape
    c_out, wc_in, k = w.shape
    if wc_in != c_in:
        raise ShapeMismatch(f"conv expects {wc_in} input channels, got {c_in}")
    if t < k:
        raise InputTooShort(f"time axis {t} shorter than kernel {k}")
    cols = _windows(x, k, stride)
    t_out = cols.shape[1]
    cols = cols.reshape(n_batch, t_out, c_in * k)
    out = cols @ w.reshape(c_out, c_in * k).T + b
    return out.transpose(0, 2, 1)


def conv1d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int = 1):
    """Return (grad_input, grad_weights, grad_bias) for `conv1d_forward`."""
    n_batch, c_in, t = x.shape
    c_out, _, k = w.shape
    t_out = (t - k) // stride + 1
    if grad_out.shape != (n_batch, c_out, t_out):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {(n_batch, c_out, t_out)}")
    cols = _windows(x, k, stride).reshape(n_batch, t_out, c_in * k)
    g = grad_out.transpose(0, 2, 1)  # [B, T_out, C_out]
    grad_w = np.einsum("bto,btj->oj", g, cols).reshape(w.shape)
    grad_b = grad_out.sum(axis=(0, 2))
    gcols = (g @ w.reshape(c_out, c_in * k)).reshape(n_batch, t_out, c_in, k)
    grad_x = np.zeros_like(x)
    span = stride * (t_out - 1) + 1
    for j in range(k):
        grad_x[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
    return grad_x, grad_w, grad_b


def maxpool1d_forward(x: np.ndarray):
    """Non-overlapping pool of width 2; returns (out, mask) where mask marks the winners."""
    t = x.shape[-1]
    if t < 2:
        raise InputTooShort("max pooling needs at least 2 time steps")
    even = x[..., 0:t - 1:2]
    odd = x[..., 1:t:2]
    take_even = even >= odd  # ties route to the first index
    return np.where(take_even, even, odd), take_even


def maxpool1d_backward(grad_out: np.ndarray, take_even: np.ndarray, t: int) -> np.ndarray:
    grad_x = np.zeros(grad_out.shape[:-1] + (t,), dtype=grad_out.dtype)
    n = grad_out.shape[-1]
    grad_x[..., 0:2 * n:2] = np.where(take_even, grad_out, 0.0)
    grad_x[..., 1:2 * n:2] = np.where(take_even, 0.0, grad_out)
    return grad_x


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=-1)


def global_avg_pool_backward(grad_out: np.ndarray, t: int) -> np.ndarray:
    return np.repeat(grad_out[..., None] / t, t, axis=-1)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"dense expects {w.shape[1]} inputs, got {x.shape[-1]}")
    return x @ w.T + b


def dense_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"grad_out width {grad_out.shape[-1]} != {w.shape[0]}")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return np.where(x > 0, grad_out, 0.0)


def sigmoid(z):
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(z, y):
    """Per-example binary cross-entropy from logits, and its gradient wrt z."""
    z = np.asarray(z)
    y = np.asarray(y, dtype=z.dtype)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - y


def bce_loss(z: float, y: int) -> float:
    return float(bce_with_logits(np.float64(z), y)[0])


# ---------------------------------------------------------------------------
# layers

class Module:
    """Base for layers and composite models: parameter naming, grads, dtype."""

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                out[prefix + name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        shape = (out_channels, in_channels, kernel_size)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = kaiming_uniform(rng, shape, in_channels * kernel_size, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self._x = None

    def forward(self, x):
        self._x = x
        return conv1d_forward(x, self.weight.value, self.bias.value, self.stride)

    def backward(self, grad_out):
        gx, gw, gb = conv1d_backward(self._x, self.weight.value, grad_out, self.stride)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = kaiming_uniform(rng, (out_dim, in_dim), in_dim, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype))
        self._x = None

    def forward(self, x):
        self._x = x
        return dense_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad_out):
        gx, gw, gb = dense_backward(self._x, self.weight.value, grad_out)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class ReLU(Module):
    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(self._x, grad_out)


class MaxPool1d(Module):
    def forward(self, x):
        self._t = x.shape[-1]
        out, self._mask = maxpool1d_forward(x)
        return out

    def backward(self, grad_out):
        return maxpool1d_backward(grad_out, self._mask, self._t)


class GlobalAvgPool(Module):
    def forward(self, x):
        self._t = x.shape[-1]
        return global_avg_pool_forward(x)

    def backward(self, grad_out):
        return global_avg_pool_backward(grad_out, self._t)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}{i}."))
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: List[Parameter], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place, using each parameter's .grad."""
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state does not match the parameter set")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.value.shape:
            raise ShapeMismatch(f"moment shape {m.shape} != parameter shape {p.value.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= update.astype(p.value.dtype)
    return state


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    tolerance: float
    errors: Dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_error:.3e} (worst: {worst}, tol {self.tolerance:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error between two gradient arrays."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def grad_check(loss_and_backward: Callable[[], float],
               arrays: Dict[str, np.ndarray],
               analytic: Callable[[], Dict[str, np.ndarray]],
               tolerance: float = 1e-4,
               h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    `arrays` maps names to the float64 arrays to perturb in place (parameter
    values and/or inputs). `loss_and_backward()` recomputes the scalar loss
    from the current array contents and runs the backward pass;
    `analytic()` then returns the gradients keyed like `arrays`.
    """
    loss_and_backward()
    grads = {k: np.array(v, dtype=np.float64) for k, v in analytic().items()}
    errors = {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks require float64 arrays")
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_and_backward()
            flat[i] = orig - h
            down = loss_and_backward()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        errors[name] = relative_error(grads[name], numeric)
    loss_and_backward()
    return GradCheckReport(tolerance, errors)


def check_module(module: Module, inputs, tolerance: float = 1e-4, h: float = 1e-5,
                 seed: int = 0, include_inputs: bool = True) -> GradCheckReport:
    """Gradient-check a module under the loss sum(forward(*inputs) * R), R fixed random.

    The module must already hold float64 parameters; `inputs` is an array or a
    tuple of arrays passed positionally to forward/backward.
    """
    inputs = inputs if isinstance(inputs, tuple) else (inputs,)
    probe = module.forward(*inputs)
    proj = np.random.default_rng(seed).standard_normal(probe.shape)
    params = module.named_parameters()
    state = {}

    def run():
        module.zero_grad()
        out = module.forward(*inputs)
        grads = module.backward(proj)
        state["inputs"] = grads if isinstance(grads, tuple) else (grads,)
        return float(np.sum(out * proj))

    def analytic():
        out = {name: p.grad for name, p in params.items()}
        if include_inputs:
            out.update({f"input{i}": g for i, g in enumerate(state["inputs"])})
        return out

    arrays = {name: p.value for name, p in params.items()}
    if include_inputs:
        arrays.update({f"input{i}": x for i, x in enumerate(inputs)})
    return grad_check(run, arrays, analytic, tolerance, h)

