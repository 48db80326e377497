"""Small differentiable layer stack: temporal convolution, dense layers, Adam.

Everything runs in float64.  Sequence tensors use the layout
``(batch, length, channels)``; dense layers act on the last axis.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("relu", "sigmoid", "none")
CHECKPOINT_FORMAT = "bsn-layer-stack"
CHECKPOINT_VERSION = 1


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(dy, y, activation):
    if activation == "relu":
        return dy * (y > 0)
    if activation == "sigmoid":
        return dy * y * (1.0 - y)
    return dy


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = ""

    def __init__(self, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    @property
    def in_features(self) -> int:
        raise NotImplementedError

    @property
    def out_features(self) -> int:
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def spec(self) -> dict:
        raise NotImplementedError


class Conv1d(Layer):
    """Stride-1 temporal convolution with symmetric zero padding.

    ``weight`` has shape ``(filters, in_channels, kernel)`` and output length
    equals input length.
    """

    kind = "conv1d"

    def __init__(self, in_channels: int, filters: int, kernel: int = 3,
                 activation: str = "relu", rng: np.random.Generator | None = None):
        super().__init__(activation)
        if kernel < 1 or kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {kernel}")
        self.in_channels = int(in_channels)
        self.filters = int(filters)
        self.kernel = int(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "weight": glorot_uniform(rng, (filters, in_channels, kernel),
                                     in_channels * kernel, filters * kernel),
            "bias": np.zeros(filters),
        }
        self.zero_grad()

    in_features = property(lambda self: self.in_channels)
    out_features = property(lambda self: self.filters)

    def spec(self):
        return {"type": self.kind, "in_channels": self.in_channels, "filters": self.filters,
                "kernel": self.kernel, "activation": self.activation}

    def _columns(self, x):
        pad = (self.kernel - 1) // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        # (B, L, C, k) -> (B, L, C*k), matching weight.reshape(filters, C*k)
        cols = sliding_window_view(xp, self.kernel, axis=1)
        return cols.reshape(x.shape[0], x.shape[1], -1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ValueError(
                f"conv1d expects (batch, length, {self.in_channels}) input, got {x.shape}")
        cols = self._columns(x)
        w = self.params["weight"].reshape(self.filters, -1)
        y = _activate(cols @ w.T + self.params["bias"], self.activation)
        self._cache = (x.shape, cols, y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        shape, cols, y = self._cache
        dz = _activation_grad(dy, y, self.activation)
        b, length, c = shape
        flat_dz = dz.reshape(-1, self.filters)
        self.grads["weight"] = (flat_dz.T @ cols.reshape(-1, cols.shape[-1])).reshape(
            self.params["weight"].shape)
        self.grads["bias"] = flat_dz.sum(axis=0)
        dcols = (dz @ self.params["weight"].reshape(self.filters, -1)).reshape(
            b, length, c, self.kernel)
        pad = (self.kernel - 1) // 2
        dxp = np.zeros((b, length + 2 * pad, c))
        for j in range(self.kernel):
            dxp[:, j:j + length, :] += dcols[..., j]
        return dxp[:, pad:pad + length, :]


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, units: int, activation: str = "relu",
                 rng: np.random.Generator | None = None):
        super().__init__(activation)
        self.n_in = int(in_features)
        self.units = int(units)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "weight": glorot_uniform(rng, (units, in_features), in_features, units),
            "bias": np.zeros(units),
        }
        self.zero_grad()

    in_features = property(lambda self: self.n_in)
    out_features = property(lambda self: self.units)

    def spec(self):
        return {"type": self.kind, "in_features": self.n_in, "units": self.units,
                "activation": self.activation}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense expects last axis {self.n_in}, got {x.shape}")
        y = _activate(x @ self.params["weight"].T + self.params["bias"], self.activation)
        self._cache = (x, y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, y = self._cache
        dz = _activation_grad(dy, y, self.activation)
        flat_dz = dz.reshape(-1, self.units)
        self.grads["weight"] = flat_dz.T @ x.reshape(-1, self.n_in)
        self.grads["bias"] = flat_dz.sum(axis=0)
        return dz @ self.params["weight"]


class LayerStack:
    """Ordered sequence of layers of one kind (all conv1d or all dense)."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("a layer stack needs at least one layer")
        kinds = {layer.kind for layer in layers}
        if len(kinds) != 1:
            raise ValueError(f"layer stack must be homogeneous, got {sorted(kinds)}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ValueError(
                    f"incompatible layers: {prev.out_features} outputs feed {nxt.in_features} inputs")
        self.layers = list(layers)
        self._forwarded = False

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x)
        self._forwarded = True
        return x

    __call__ = forward

    def backward(self, grad_output) -> np.ndarray:
        """Backpropagate ``d loss / d output``; fills each layer's ``grads``.

        Returns the gradient with respect to the stack input.
        """
        if not self._forwarded:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_output, dtype=np.float64)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def named_parameters(self) -> Iterator[tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                yield f"layer{i}.{key}", layer, key

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: layer.grads[key] for name, layer, key in self.named_parameters()}

    def get_flat(self) -> np.ndarray:
        return np.concatenate([layer.params[k].ravel() for _, layer, k in self.named_parameters()])

    def num_parameters(self) -> int:
        return sum(layer.params[k].size for _, layer, k in self.named_parameters())

    def copy(self) -> "LayerStack":
        return stack_from_dict(stack_to_dict(self))


def rowwise_forward(stack: LayerStack, x, chunk: int = 128) -> np.ndarray:
    """Dense-stack forward pass whose result for a row never depends on the batch.

    BLAS picks different kernels (and summation orders) for different batch
    shapes; here each output is an explicit per-row reduction, so scoring one
    row at a time or all at once is bitwise identical.  No cache is kept.
    """
    x = np.asarray(x, dtype=np.float64)
    if any(layer.kind != "dense" for layer in stack.layers):
        raise ValueError("rowwise_forward supports dense stacks only")
    if x.ndim != 2 or x.shape[1] != stack.in_features:
        raise ValueError(f"expected (n, {stack.in_features}) input, got {x.shape}")
    out = np.empty((len(x), stack.out_features))
    for lo in range(0, len(x), chunk):
        h = x[lo:lo + chunk]
        for layer in stack.layers:
            w, b = layer.params["weight"], layer.params["bias"]
            h = _activate((h[:, None, :] * w[None, :, :]).sum(axis=-1) + b, layer.activation)
        out[lo:lo + chunk] = h
    return out


def conv_stack(in_channels: int, spec: list[tuple[int, int, str]], seed: int = 0) -> LayerStack:
    """Build a conv stack from ``[(filters, kernel, activation), ...]``."""
    rng = np.random.default_rng(seed)
    layers, c = [], in_channels
    for filters, kernel, act in spec:
        layers.append(Conv1d(c, filters, kernel, act, rng=rng))
        c = filters
    return LayerStack(layers)


def mlp_stack(in_features: int, spec: list[tuple[int, str]], seed: int = 0) -> LayerStack:
    """Build a dense stack from ``[(units, activation), ...]``."""
    rng = np.random.default_rng(seed)
    layers, n = [], in_features
    for units, act in spec:
        layers.append(Dense(n, units, act, rng=rng))
        n = units
    return LayerStack(layers)


@dataclass
class OptimizerConfig:
    """Adaptive-moment (or plain SGD) settings with a piecewise-constant schedule.

    ``schedule`` is a list of ``(epoch_count, learning_rate)`` stages; when
    empty, training runs one stage at ``learning_rate``.
    """

    learning_rate: float = 1e-3
    schedule: list[tuple[int, float]] = field(default_factory=lambda: [(10, 1e-3), (10, 1e-4)])
    batch_size: int = 16
    seed: int = 0
    algorithm: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.algorithm not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        self.schedule = [(int(n), float(lr)) for n, lr in self.schedule]

    @property
    def total_epochs(self) -> int:
        return sum(n for n, _ in self.schedule) if self.schedule else 1

    def lr_at(self, epoch: int) -> float:
        for n, lr in self.schedule:
            if epoch < n:
                return lr
            epoch -= n
        return self.schedule[-1][1] if self.schedule else self.learning_rate


class Optimizer:
    """Holds per-parameter moment estimates for one stack."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, stack: LayerStack, lr: float | None = None) -> None:
        cfg = self.config
        lr = cfg.learning_rate if lr is None else lr
        named = list(stack.named_parameters())
        for name, layer, key in named:
            g = layer.grads[key]
            if g.shape != layer.params[key].shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        self.t += 1
        for name, layer, key in named:
            g = layer.grads[key]
            if cfg.algorithm == "sgd":
                layer.params[key] -= lr * g
                continue
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** self.t)
            v_hat = v / (1 - cfg.beta2 ** self.t)
            layer.params[key] -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def optimizer_step(stack: LayerStack, optimizer: Optimizer, lr: float | None = None) -> LayerStack:
    optimizer.step(stack, lr)
    return stack


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def _relu_pattern(stack: LayerStack) -> list[np.ndarray]:
    return [layer._cache[-1] > 0 for layer in stack.layers if layer.activation == "relu"]


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(stack: LayerStack, x, loss: LossFn, h: float = 1e-3, max_shrink: int = 4) -> float:
    """Max relative error between backprop and central finite differences.

    ``loss`` maps the stack output to ``(value, d value / d output)``.  The
    relative error of one element is ``|a - n| / max(|a|, |n|, 1e-8)``.  If a
    perturbation flips any ReLU on or off, the difference straddles a kink
    and is retried with a step ten times smaller (at most ``max_shrink``
    times).
    """
    x = np.asarray(x, dtype=np.float64)
    _, g = loss(stack.forward(x))
    base = _relu_pattern(stack)
    stack.backward(g)
    analytic = {name: layer.grads[key].copy() for name, layer, key in stack.named_parameters()}
    worst = 0.0
    for name, layer, key in stack.named_parameters():
        flat = layer.params[key].reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            step = h
            for _ in range(max_shrink + 1):
                flat[i] = old + step
                fp = loss(stack.forward(x))[0]
                kink = not _same_pattern(base, _relu_pattern(stack))
                flat[i] = old - step
                fm = loss(stack.forward(x))[0]
                kink = kink or not _same_pattern(base, _relu_pattern(stack))
                flat[i] = old
                if not kink:
                    break
                step /= 10.0
            num[i] = (fp - fm) / (2 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    # leave caches consistent with the unperturbed parameters
    stack.forward(x)
    return worst


def stack_to_dict(stack: LayerStack) -> dict:
    layers = []
    for layer in stack.layers:
        entry = layer.spec()
        entry["params"] = {k: v.ravel().tolist() for k, v in layer.params.items()}
        layers.append(entry)
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "layers": layers}


def stack_from_dict(data: dict) -> LayerStack:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a layer-stack checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('version')}")
    layers = []
    for entry in data["layers"]:
        if entry["type"] == "conv1d":
            layer = Conv1d(entry["in_channels"], entry["filters"], entry["kernel"], entry["activation"])
        elif entry["type"] == "dense":
            layer = Dense(entry["in_features"], entry["units"], entry["activation"])
        else:
            raise ValueError(f"unknown layer type {entry['type']!r}")
        for k, flat in entry["params"].items():
            layer.params[k] = np.asarray(flat, dtype=np.float64).reshape(layer.params[k].shape)
        layers.append(layer)
    return LayerStack(layers)


def save_stack(stack: LayerStack, path) -> None:
    """Write a JSON checkpoint; float repr round-trips float64 exactly."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(stack_to_dict(stack), fh)
    os.replace(tmp, path)


def load_stack(path) -> LayerStack:
    with open(path) as fh:
        return stack_from_dict(json.load(fh))
