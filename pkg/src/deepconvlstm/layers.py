"""Parameterised layers: temporal convolution, single LSTM layer, dense head.

LSTM gate rows are stacked in the order input, forget, cell, output, and each
layer carries a single bias vector of length ``4h``.  That is the only bias
convention under which a layer has exactly ``4*(s*h + h*h + h)`` parameters.
"""
from __future__ import annotations

import io
import json
import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .fileio import atomic_write_bytes
from .tensor import Tensor

GATE_ORDER = ("input", "forget", "cell", "output")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator, shape=None, dtype=None) -> Tensor:
    """Glorot/Xavier uniform sample on ``[-a, a]`` with ``a = sqrt(6/(fan_in+fan_out))``.

    ``shape`` defaults to ``(fan_out, fan_in)``.
    """
    if fan_in < 1 or fan_out < 1:
        raise ConfigError("fan_in/fan_out", f"must be >= 1, got {fan_in}, {fan_out}")
    dtype = np.dtype(dtype or T.get_default_dtype())
    shape = (fan_out, fan_in) if shape is None else tuple(shape)
    a = glorot_bound(fan_in, fan_out)
    # drawn directly in the target dtype: no float64 detour for large matrices
    values = rng.random(shape, dtype=dtype)
    values *= 2 * a
    values -= a
    return Tensor(values, requires_grad=True)


def _zeros(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype or T.get_default_dtype()), requires_grad=True)


class Layer:
    """Plain parameter container."""

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


class ConvLayer(Layer):
    """Temporal convolution with kernel ``(k, 1)`` followed by ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_len: int,
                 rng: np.random.Generator, dtype=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_len = kernel_len
        self.kernels = glorot_init(in_channels * kernel_len, out_channels * kernel_len, rng,
                                   shape=(out_channels, in_channels, kernel_len, 1), dtype=dtype)
        self.bias = _zeros(out_channels, dtype)

    def parameters(self):
        return {"kernels": self.kernels, "bias": self.bias}

    def expected_count(self) -> int:
        return self.out_channels * self.in_channels * self.kernel_len + self.out_channels

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(T.conv2d_valid(x, self.kernels, self.bias))


class LstmLayer(Layer):
    """One LSTM layer: ``W[4h, s]``, ``U[4h, h]``, ``b[4h]``; zero initial state."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=None):
        if input_size < 1 or hidden_size < 1:
            raise ConfigError("hidden_units", f"input and hidden sizes must be >= 1, got {input_size}, {hidden_size}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        h4 = 4 * hidden_size
        self.W = glorot_init(input_size, h4, rng, dtype=dtype)
        self.U = glorot_init(hidden_size, h4, rng, dtype=dtype)
        self.b = _zeros(h4, dtype)

    def parameters(self):
        return {"W": self.W, "U": self.U, "b": self.b}

    def expected_count(self) -> int:
        s, h = self.input_size, self.hidden_size
        return 4 * (s * h + h * h + h)

    def __call__(self, x: Tensor):
        return lstm_forward(self, x)


def lstm_forward(layer: LstmLayer, x: Tensor) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Run the layer over ``x[B, T, input_size]``.

    Returns the hidden sequence ``[B, T, h]`` and the final ``(h_T, c_T)``.
    """
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[2] != layer.input_size:
        raise ShapeError(f"LSTM expects [B, T, {layer.input_size}], got {x.shape}")
    B, steps, s = x.shape
    if steps < 1:
        raise ShapeError("LSTM input needs at least one time step")
    h = layer.hidden_size

    # input projection for all steps at once
    xw = T.matmul(T.reshape(x, (B * steps, s)), T.transpose(layer.W))
    xw = T.add(T.reshape(xw, (B, steps, 4 * h)), layer.b)
    u_t = T.transpose(layer.U)

    h_t = None
    c_t = None
    outputs = []
    for t in range(steps):
        gates = xw[:, t, :]
        if h_t is not None:
            gates = T.add(gates, T.matmul(h_t, u_t))
        i = T.sigmoid(gates[:, :h])
        f = T.sigmoid(gates[:, h:2 * h])
        g = T.tanh(gates[:, 2 * h:3 * h])
        o = T.sigmoid(gates[:, 3 * h:])
        # zero initial state: c_1 = i*g
        c_t = T.mul(i, g) if c_t is None else T.add(T.mul(f, c_t), T.mul(i, g))
        h_t = T.mul(o, T.tanh(c_t))
        outputs.append(h_t)
    return T.stack(outputs, axis=1), (h_t, c_t)


class DenseLayer(Layer):
    """Affine classifier ``x @ W.T + b`` with ``W[K, in]``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=None):
        self.in_features = in_features
        self.out_features = out_features
        self.W = glorot_init(in_features, out_features, rng, dtype=dtype)
        self.b = _zeros(out_features, dtype)

    def parameters(self):
        return {"W": self.W, "b": self.b}

    def expected_count(self) -> int:
        return self.out_features * self.in_features + self.out_features

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"dense layer expects [B, {layer.in_features}], got {x.shape}")
    return T.add(T.matmul(x, T.transpose(layer.W)), layer.b)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "deepconvlstm-checkpoint"
CHECKPOINT_VERSION = 1


def iter_named(layers: dict[str, Layer]) -> Iterator[tuple[str, Tensor]]:
    for lname, layer in layers.items():
        for pname, p in layer.parameters().items():
            yield f"{lname}.{pname}", p


def save_checkpoint(path, layers: dict[str, Layer], metadata: dict | None = None) -> None:
    """Write all parameters to a ``.npz`` archive.

    The archive holds one array per ``"<layer>.<param>"`` key plus a
    ``__meta__`` entry: a JSON document with the format tag, version, LSTM
    gate order, the ordered parameter names with shapes, and any caller
    metadata (e.g. the model config).
    """
    arrays = {name: p.data for name, p in iter_named(layers)}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "gate_order": list(GATE_ORDER),
        "parameters": [{"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in arrays.items()],
        **(metadata or {}),
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a checkpoint of this package")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {entry["name"]: archive[entry["name"]] for entry in meta["parameters"]}
    return arrays, meta


def assign_parameters(layers: dict[str, Layer], arrays: dict[str, np.ndarray]) -> None:
    for name, p in iter_named(layers):
        if name not in arrays:
            raise ShapeError(f"checkpoint is missing parameter {name}")
        if arrays[name].shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
        p.data = arrays[name].astype(p.dtype, copy=True)
