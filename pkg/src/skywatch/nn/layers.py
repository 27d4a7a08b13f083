"""Layers with hand-written forward and backward passes.

Every layer keeps its trainable arrays in ``params`` and, after ``backward``,
the matching gradients in ``grads`` (same keys, same shapes). ``forward``
caches whatever ``backward`` needs; calling ``backward`` without a prior
``forward`` raises :class:`StateError`.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ConfigError, DimensionError, StateError
from .functional import as_tensor, check_finite, sigmoid, softmax

ACTIVATIONS = ("relu", "identity", "softmax", "tanh")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self) -> None:
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def config(self) -> dict:
        return {"type": type(self).__name__}


class Dense(Layer):
    """Fully connected layer ``y = act(x @ W + b)`` on ``[batch, in]`` inputs."""

    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.n_in, self.n_out, self.activation = int(n_in), int(n_out), activation
        if zero_init:
            w = np.zeros((self.n_in, self.n_out))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            w = glorot_uniform(rng, self.n_in, self.n_out, (self.n_in, self.n_out))
        self.params = {"W": w, "b": np.zeros(self.n_out)}
        self.zero_grad()

    def forward(self, x, training=False, rng=None):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"Dense expects [batch, {self.n_in}], got {x.shape}")
        z = x @ self.params["W"] + self.params["b"]
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "tanh":
            y = np.tanh(z)
        elif self.activation == "softmax":
            y = softmax(z)
        else:
            y = z
        self._cache = (x, z, y)
        return check_finite(y, "Dense.forward")

    def backward(self, grad):
        x, z, y = self._cached()
        if self.activation == "relu":
            dz = grad * (z > 0)
        elif self.activation == "tanh":
            dz = grad * (1.0 - y**2)
        elif self.activation == "softmax":
            dz = y * (grad - np.sum(grad * y, axis=1, keepdims=True))
        else:
            dz = grad
        self.grads = {"W": x.T @ dz, "b": dz.sum(axis=0)}
        return dz @ self.params["W"].T

    def config(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out,
                "activation": self.activation}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in training.

    In eval mode (``training=False``) the layer is the identity. Setting
    ``frozen = True`` makes subsequent training-mode passes reuse the last
    mask, which is what a finite-difference check needs.
    """

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)
        self.frozen = False
        self._mask = None

    def forward(self, x, training=False, rng=None):
        x = as_tensor(x)
        if not training or self.rate == 0.0:
            self._cache = ("identity",)
            return x
        if not (self.frozen and self._mask is not None and self._mask.shape == x.shape):
            if rng is None:
                raise ConfigError("training-mode dropout needs a random generator")
            keep = rng.random(x.shape) >= self.rate
            self._mask = keep / (1.0 - self.rate)
        self._cache = ("mask",)
        return x * self._mask

    def backward(self, grad):
        kind = self._cached()[0]
        if kind == "identity":
            return grad
        return grad * self._mask

    def config(self):
        return {"type": "Dropout", "rate": self.rate}


class LSTM(Layer):
    """Single LSTM layer over ``[batch, T, in]`` returning the last hidden state.

    Gate weights act on the concatenation ``[x_t, h_{t-1}]``. The forget-gate
    bias starts at 1.0.
    """

    GATES = ("i", "f", "o", "g")

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        super().__init__()
        self.n_in, self.hidden = int(n_in), int(hidden)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan = self.n_in + self.hidden
        for g in self.GATES:
            if zero_init:
                self.params[f"W_{g}"] = np.zeros((fan, self.hidden))
            else:
                self.params[f"W_{g}"] = glorot_uniform(rng, fan, self.hidden, (fan, self.hidden))
            self.params[f"b_{g}"] = np.zeros(self.hidden)
        if not zero_init:
            self.params["b_f"][:] = 1.0
        self.zero_grad()

    def forward(self, x, training=False, rng=None):
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.n_in or x.shape[1] < 1:
            raise DimensionError(f"LSTM expects [batch, T>=1, {self.n_in}], got {x.shape}")
        batch, steps, _ = x.shape
        p = self.params
        h = np.zeros((batch, self.hidden))
        c = np.zeros((batch, self.hidden))
        steps_cache = []
        for t in range(steps):
            z = np.concatenate([x[:, t, :], h], axis=1)
            i = sigmoid(z @ p["W_i"] + p["b_i"])
            f = sigmoid(z @ p["W_f"] + p["b_f"])
            o = sigmoid(z @ p["W_o"] + p["b_o"])
            g = np.tanh(z @ p["W_g"] + p["b_g"])
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            steps_cache.append((z, i, f, o, g, c_prev, tc))
        self._cache = steps_cache
        return check_finite(h, "LSTM.forward")

    def backward(self, grad):
        steps_cache = self._cached()
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        batch = grad.shape[0]
        dx = np.zeros((batch, len(steps_cache), self.n_in))
        dh = grad
        dc = np.zeros((batch, self.hidden))
        for t in range(len(steps_cache) - 1, -1, -1):
            z, i, f, o, g, c_prev, tc = steps_cache[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc**2)
            pre = {
                "i": dc * g * i * (1.0 - i),
                "f": dc * c_prev * f * (1.0 - f),
                "o": do * o * (1.0 - o),
                "g": dc * i * (1.0 - g**2),
            }
            dz = np.zeros_like(z)
            for gate, da in pre.items():
                grads[f"W_{gate}"] += z.T @ da
                grads[f"b_{gate}"] += da.sum(axis=0)
                dz += da @ p[f"W_{gate}"].T
            dc = dc * f
            dx[:, t, :] = dz[:, : self.n_in]
            dh = dz[:, self.n_in:]
        self.grads = grads
        return dx

    def config(self):
        return {"type": "LSTM", "n_in": self.n_in, "hidden": self.hidden}


class Conv2D(Layer):
    """Stride-1, same-padded square convolution on ``[batch, C, H, W]``."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigError("same padding needs an odd kernel size")
        self.c_in, self.c_out, self.kernel = int(c_in), int(c_out), int(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        k2 = self.kernel * self.kernel
        shape = (self.c_out, self.c_in, self.kernel, self.kernel)
        self.params = {"W": glorot_uniform(rng, self.c_in * k2, self.c_out * k2, shape),
                       "b": np.zeros(self.c_out)}
        self.zero_grad()

    def forward(self, x, training=False, rng=None):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise DimensionError(f"Conv2D expects [batch, {self.c_in}, H, W], got {x.shape}")
        pad = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        out = np.tensordot(cols, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        self._cache = (x.shape, cols)
        return check_finite(np.ascontiguousarray(out), "Conv2D.forward")

    def backward(self, grad):
        shape, cols = self._cached()
        n, _, h, w = shape
        k, pad = self.kernel, self.kernel // 2
        weights = self.params["W"]
        self.grads = {
            "W": np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3])),
            "b": grad.sum(axis=(0, 2, 3)),
        }
        dxp = np.zeros((n, self.c_in, h + 2 * pad, w + 2 * pad))
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di:di + h, dj:dj + w] += np.einsum(
                    "nohw,oc->nchw", grad, weights[:, :, di, dj], optimize=True)
        return dxp[:, :, pad:pad + h, pad:pad + w]

    def config(self):
        return {"type": "Conv2D", "c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel}


class ReLU(Layer):
    def forward(self, x, training=False, rng=None):
        x = as_tensor(x)
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return grad * self._cached()


class MaxPool2D(Layer):
    """2x2, stride-2 max pooling; ties route the gradient to the first maximum."""

    def forward(self, x, training=False, rng=None):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"MaxPool2D needs even spatial dims, got {x.shape}")
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = np.argmax(win, axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        shape, idx = self._cached()
        n, c, h, w = shape
        win = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
        win = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return win.reshape(shape)


class Flatten(Layer):
    def forward(self, x, training=False, rng=None):
        x = as_tensor(x)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cached())


class Sequential(Layer):
    """Ordered stack of layers; parameter names are ``"<index>.<name>"``."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)
        self._ran = False

    @property
    def params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.params.items()}

    @property
    def grads(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.grads.items()}

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        self._ran = True
        return x

    def backward(self, grad):
        if not self._ran:
            raise StateError("Sequential.backward called before forward")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self) -> Iterator[tuple[Layer, str]]:
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    def config(self):
        return {"type": "Sequential", "layers": [layer.config() for layer in self.layers]}


def backward(network: Layer, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Run reverse mode through ``network`` and return its parameter gradients."""
    network.backward(loss_grad)
    return {k: v.copy() for k, v in network.grads.items()}


def layer_from_config(cfg: dict) -> Layer:
    kind = cfg["type"]
    if kind == "Dense":
        return Dense(cfg["n_in"], cfg["n_out"], cfg["activation"])
    if kind == "LSTM":
        return LSTM(cfg["n_in"], cfg["hidden"])
    if kind == "Conv2D":
        return Conv2D(cfg["c_in"], cfg["c_out"], cfg["kernel"])
    if kind == "Dropout":
        return Dropout(cfg["rate"])
    if kind == "Sequential":
        return Sequential([layer_from_config(c) for c in cfg["layers"]])
    simple = {"ReLU": ReLU, "MaxPool2D": MaxPool2D, "Flatten": Flatten}
    if kind in simple:
        return simple[kind]()
    raise ConfigError(f"unknown layer type {kind!r}")
