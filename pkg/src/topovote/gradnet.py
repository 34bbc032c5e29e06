"""Minimal differentiable network core: float64 forward, reverse-mode
gradients w.r.t. parameters and inputs, and SGD/Adam optimizers.

Supported layers: Dense, Conv2D (valid padding, configurable stride),
ReLU, Flatten. Everything runs on plain numpy float64 arrays; a "tensor"
here is simply an ``np.ndarray`` of dtype float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Layer/input shape incompatibility; message names the offending layer."""


class NonFiniteLossError(FloatingPointError):
    """A loss evaluated to NaN/Inf. Carries the batch row that produced it."""

    def __init__(self, message: str, batch_index: int):
        super().__init__(message)
        self.batch_index = batch_index


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Layer descriptors


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = object  # any of the above


def _layer_output_shape(layer, shape: tuple, index: int) -> tuple:
    name = f"layer {index} ({type(layer).__name__})"
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ShapeError(
                f"{name} expects flat input of {layer.in_features}, got {shape}"
            )
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(
                f"{name} expects (channels={layer.in_channels}, H, W), got {shape}"
            )
        _, h, w = shape
        k, s = layer.kernel, layer.stride
        if h < k or w < k:
            raise ShapeError(f"{name}: kernel {k} larger than input {h}x{w}")
        return (layer.out_channels, (h - k) // s + 1, (w - k) // s + 1)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise TypeError(f"unknown layer type at {name}")


@dataclass
class Network:
    """Ordered layers plus a named parameter map.

    Parameters live in ``params`` under stable names (``layer{i}.weight``,
    ``layer{i}.bias``), which is what checkpointing relies on. A Network is
    never mutated by inference; only optimizer steps write to ``params``.
    """

    layers: tuple
    input_shape: tuple
    num_classes: int
    params: dict = field(default_factory=dict)

    def clone(self) -> "Network":
        return Network(
            self.layers,
            self.input_shape,
            self.num_classes,
            {k: v.copy() for k, v in self.params.items()},
        )


def build_network(
    layers: Sequence,
    input_shape: Sequence[int],
    num_classes: int,
    rng: np.random.Generator,
) -> Network:
    """Validate layer chaining, He-uniform-initialize weights, zero biases."""
    layers = tuple(layers)
    input_shape = tuple(int(d) for d in input_shape)
    shape = input_shape
    params: dict = {}
    for i, layer in enumerate(layers):
        shape = _layer_output_shape(layer, shape, i)
        if isinstance(layer, Dense):
            fan_in = layer.in_features
            bound = np.sqrt(6.0 / fan_in)
            params[f"layer{i}.weight"] = rng.uniform(
                -bound, bound, size=(layer.in_features, layer.out_features)
            )
            params[f"layer{i}.bias"] = np.zeros(layer.out_features)
        elif isinstance(layer, Conv2D):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            params[f"layer{i}.weight"] = rng.uniform(
                -bound,
                bound,
                size=(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
            )
            params[f"layer{i}.bias"] = np.zeros(layer.out_channels)
    if len(shape) != 1 or shape[0] != num_classes:
        raise ShapeError(
            f"network output shape {shape} does not match num_classes={num_classes}"
        )
    return Network(layers, input_shape, int(num_classes), params)


# ---------------------------------------------------------------------------
# Batches


@dataclass(frozen=True)
class Batch:
    """Inputs in [0,1] with integer class labels in [0, C)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = as_tensor(self.inputs)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise ValueError("labels must be a flat list matching the batch size")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")
        if inputs.size and not np.isfinite(inputs).all():
            raise ValueError("batch inputs must be finite")
        if inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise ValueError("batch inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


# ---------------------------------------------------------------------------
# Forward / backward engine


def _conv_windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # [B, C, Ho, Wo, k, k], a strided view; contractions copy as needed
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _forward_cached(net: Network, x: np.ndarray):
    x = as_tensor(x)
    if tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(
            f"input shape {tuple(x.shape[1:])} does not match network input "
            f"{net.input_shape}"
        )
    caches = []
    out = x
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            w = net.params[f"layer{i}.weight"]
            b = net.params[f"layer{i}.bias"]
            caches.append(out)
            out = out @ w + b
        elif isinstance(layer, Conv2D):
            w = net.params[f"layer{i}.weight"]
            b = net.params[f"layer{i}.bias"]
            win = _conv_windows(out, layer.kernel, layer.stride)
            caches.append((out.shape, win))
            # contract over (Cin, k, k)
            out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
            out = np.transpose(out, (0, 3, 1, 2)) + b[None, :, None, None]
        elif isinstance(layer, ReLU):
            caches.append(out > 0)
            out = np.maximum(out, 0.0)
        elif isinstance(layer, Flatten):
            caches.append(out.shape)
            out = out.reshape(out.shape[0], -1)
        else:
            raise TypeError(f"unknown layer type at layer {i}")
    return out, caches


def _backward(net: Network, caches, d_out: np.ndarray, want_input_grad: bool):
    param_grads: dict = {}
    g = d_out
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            x = cache
            param_grads[f"layer{i}.weight"] = x.T @ g
            param_grads[f"layer{i}.bias"] = g.sum(axis=0)
            g = g @ net.params[f"layer{i}.weight"].T
        elif isinstance(layer, Conv2D):
            x_shape, win = cache
            w = net.params[f"layer{i}.weight"]
            # dW: contract g [B,Co,Ho,Wo] with windows over (B,Ho,Wo)
            param_grads[f"layer{i}.weight"] = np.tensordot(
                g, win, axes=([0, 2, 3], [0, 2, 3])
            )
            param_grads[f"layer{i}.bias"] = g.sum(axis=(0, 2, 3))
            if i > 0 or want_input_grad:
                k, s = layer.kernel, layer.stride
                ho, wo = g.shape[2], g.shape[3]
                dx = np.zeros(x_shape)
                for ki in range(k):
                    for kj in range(k):
                        # [B,Ho,Wo,Ci] contribution through tap (ki,kj)
                        t = np.tensordot(g, w[:, :, ki, kj], axes=([1], [0]))
                        dx[
                            :,
                            :,
                            ki : ki + s * (ho - 1) + 1 : s,
                            kj : kj + s * (wo - 1) + 1 : s,
                        ] += np.transpose(t, (0, 3, 1, 2))
                g = dx
            else:
                g = None
        elif isinstance(layer, ReLU):
            g = g * cache
        elif isinstance(layer, Flatten):
            g = g.reshape(cache)
    return param_grads, g


def forward(net: Network, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape [B, C]. Pure: no state is touched."""
    logits, _ = _forward_cached(net, inputs)
    return logits


def predict(net: Network, inputs: np.ndarray) -> np.ndarray:
    """Argmax classes; ties break to the lowest index (np.argmax)."""
    return np.argmax(forward(net, inputs), axis=1)


# ---------------------------------------------------------------------------
# Losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    # non-finite logits propagate to non-finite rows, caught by the callers
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_rows_finite(per_row: np.ndarray, what: str):
    bad = np.flatnonzero(~np.isfinite(per_row))
    if bad.size:
        raise NonFiniteLossError(
            f"{what} is non-finite at batch index {int(bad[0])}", int(bad[0])
        )


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean of -log softmax(logits)[label] over the batch (stable log-sum-exp)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, C], got {logits.shape}")
    if logits.shape[0] == 0:
        raise ValueError("cross_entropy of an empty batch")
    if labels.shape != (logits.shape[0],):
        raise ValueError("labels must match the batch dimension")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    rows = -log_softmax(logits)[np.arange(logits.shape[0]), labels]
    _check_rows_finite(rows, "cross-entropy")
    return float(rows.mean())


class CrossEntropyLoss:
    """Mean cross-entropy against fixed labels; value and d/dlogits."""

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def value_and_grad(self, logits: np.ndarray):
        value = cross_entropy(logits, self.labels)
        b = logits.shape[0]
        grad = softmax(logits)
        grad[np.arange(b), self.labels] -= 1.0
        return value, grad / b


def grad_params(net: Network, batch: Batch, loss=None) -> dict:
    """Gradient of the mean loss w.r.t. every named parameter.

    ``loss`` is any object exposing ``value_and_grad(logits)``; defaults to
    cross-entropy against the batch labels.
    """
    if loss is None:
        loss = CrossEntropyLoss(batch.labels)
    logits, caches = _forward_cached(net, batch.inputs)
    _, d_logits = loss.value_and_grad(logits)
    grads, _ = _backward(net, caches, d_logits, want_input_grad=False)
    return grads


def grad_input(net: Network, inputs: np.ndarray, loss) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the inputs, parameters held fixed."""
    logits, caches = _forward_cached(net, inputs)
    _, d_logits = loss.value_and_grad(logits)
    _, dx = _backward(net, caches, d_logits, want_input_grad=True)
    return dx


def loss_and_param_grads(net: Network, inputs: np.ndarray, loss):
    """One forward/backward pass returning (loss value, named grads)."""
    logits, caches = _forward_cached(net, inputs)
    value, d_logits = loss.value_and_grad(logits)
    grads, _ = _backward(net, caches, d_logits, want_input_grad=False)
    return value, grads


def loss_and_input_grad(net: Network, inputs: np.ndarray, loss):
    """One forward/backward pass returning (loss value, d loss / d inputs)."""
    logits, caches = _forward_cached(net, inputs)
    value, d_logits = loss.value_and_grad(logits)
    _, dx = _backward(net, caches, d_logits, want_input_grad=True)
    return value, dx


# ---------------------------------------------------------------------------
# Optimizers


def _check_grads_match(net: Network, grads: dict):
    if set(grads) != set(net.params):
        missing = sorted(set(net.params) - set(grads))
        extra = sorted(set(grads) - set(net.params))
        raise ValueError(f"gradient names mismatch: missing={missing} extra={extra}")


class SGD:
    """SGD with optional classical momentum; state carried between steps."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict = {}

    def step(self, net: Network, grads: dict) -> Network:
        _check_grads_match(net, grads)
        for name, g in grads.items():
            if self.momentum > 0.0:
                v = self._velocity.get(name)
                v = self.momentum * v + g if v is not None else g.copy()
                self._velocity[name] = v
                net.params[name] -= self.lr * v
            else:
                net.params[name] -= self.lr * g
        return net


class Adam:
    """Adam with bias correction. Defaults: beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        for name, b in (("beta1", beta1), ("beta2", beta2)):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m: dict = {}
        self._v: dict = {}
        self._t = 0

    def step(self, net: Network, grads: dict) -> Network:
        _check_grads_match(net, grads)
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self._m.get(name, 0.0)
            v = self._v.get(name, 0.0)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - b1**self._t)
            v_hat = v / (1.0 - b2**self._t)
            net.params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return net


def sgd_step(net: Network, grads: dict, opt: SGD) -> Network:
    """Apply one SGD update; ``opt`` carries momentum state between calls."""
    return opt.step(net, grads)


def adam_step(net: Network, grads: dict, opt: Adam) -> Network:
    """Apply one Adam update; ``opt`` carries moment state between calls."""
    return opt.step(net, grads)


def make_optimizer(kind: str, lr: float, **kwargs):
    if kind == "adam":
        return Adam(lr=lr, **kwargs)
    if kind == "sgd":
        return SGD(lr=lr, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r} (use 'adam' or 'sgd')")
