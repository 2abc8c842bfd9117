"""DeepConvLSTM with a one- or two-layer LSTM head.

Data flow for a batch ``[B, 1, s_w, C]``::

    4 x (conv (k,1) + ReLU)      -> [B, F, T', C]        T' = s_w - n_conv*(k-1)
    permute + flatten             -> [B, T', F*C]         feature index = f*C + c
    LSTM (1 or 2 layers, width h) -> hidden state at T'
    dropout (training only)       -> dense                -> logits [B, K]
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import ConvLayer, DenseLayer, Layer, LstmLayer, assign_parameters, iter_named, load_checkpoint, save_checkpoint
from .tensor import Tensor

RESHAPE_ORDER = "time-major; feature index = filter * channels + channel"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    channels: int
    window_samples: int
    num_conv_layers: int = 4
    num_filters: int = 64
    kernel_len: int = 11
    lstm_layers: int = 1
    hidden_units: int = 128
    dropout_p: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_classes", "channels", "window_samples", "num_conv_layers",
                     "num_filters", "kernel_len", "hidden_units"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"need at least 2 classes, got {self.num_classes}")
        if self.lstm_layers not in (1, 2):
            raise ConfigError("lstm_layers", f"must be 1 or 2, got {self.lstm_layers!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p", f"must lie in [0, 1), got {self.dropout_p}")
        if self.window_samples <= self.num_conv_layers * (self.kernel_len - 1):
            raise ConfigError(
                "window_samples",
                f"{self.window_samples} samples leave no time steps after {self.num_conv_layers} "
                f"convolutions of length {self.kernel_len} (need > {self.num_conv_layers * (self.kernel_len - 1)})")

    @property
    def conv_time_steps(self) -> int:
        return self.window_samples - self.num_conv_layers * (self.kernel_len - 1)

    @property
    def lstm_input_size(self) -> int:
        return self.num_filters * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**d)


class InventoryEntry(NamedTuple):
    layer: str
    param: str
    shape: tuple[int, ...]
    count: int


class DeepConvLstmModel:
    def __init__(self, config: ModelConfig, convs: list[ConvLayer], lstms: list[LstmLayer], dense: DenseLayer):
        self.config = config
        self.convs = convs
        self.lstms = lstms
        self.dense = dense

    @property
    def layers(self) -> dict[str, Layer]:
        out: dict[str, Layer] = {f"conv{i + 1}": c for i, c in enumerate(self.convs)}
        out.update({f"lstm{i + 1}": l for i, l in enumerate(self.lstms)})
        out["dense"] = self.dense
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(iter_named(self.layers))

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, batch, training: bool = False, rng=None) -> Tensor:
        return forward(self, batch, training, rng)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"model_config": self.config.to_dict(), "reshape_order": RESHAPE_ORDER}
        if extra:
            meta["extra"] = extra
        save_checkpoint(path, self.layers, meta)

    @classmethod
    def load(cls, path) -> "DeepConvLstmModel":
        arrays, meta = load_checkpoint(path)
        config = ModelConfig.from_dict(meta["model_config"])
        dtype = next(iter(arrays.values())).dtype
        model = build(config, seed=0, dtype=dtype)
        assign_parameters(model.layers, arrays)
        return model


def build(config: ModelConfig, seed: int, dtype=None) -> DeepConvLstmModel:
    """Glorot-initialise every layer from ``default_rng(seed)`` in a fixed order."""
    config.validate()
    rng = np.random.default_rng(seed)
    convs = []
    cin = 1
    for _ in range(config.num_conv_layers):
        convs.append(ConvLayer(cin, config.num_filters, config.kernel_len, rng, dtype))
        cin = config.num_filters
    lstms = [LstmLayer(config.lstm_input_size, config.hidden_units, rng, dtype)]
    if config.lstm_layers == 2:
        lstms.append(LstmLayer(config.hidden_units, config.hidden_units, rng, dtype))
    dense = DenseLayer(config.hidden_units, config.num_classes, rng, dtype)
    return DeepConvLstmModel(config, convs, lstms, dense)


def forward(model: DeepConvLstmModel, batch, training: bool = False, rng=None) -> Tensor:
    cfg = model.config
    x = T.as_tensor(batch)
    if x.ndim == 3:
        x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
    expected = (1, cfg.window_samples, cfg.channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"batch must be [B, {', '.join(map(str, expected))}], got {x.shape}")
    B = x.shape[0]
    for conv in model.convs:
        x = conv(x)
    steps = x.shape[2]
    x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, steps, cfg.lstm_input_size))
    for lstm in model.lstms:
        x, (last, _) = lstm(x)
    x = T.dropout(last, cfg.dropout_p, training, rng)
    return model.dense(x)


def predict_logits(model: DeepConvLstmModel, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode logits ``[N, K]`` for ``windows[N, s_w, C]``."""
    out = []
    dtype = model.dense.W.dtype
    with T.no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = np.asarray(windows[start:start + batch_size], dtype=dtype)
            out.append(forward(model, chunk[:, None, :, :], training=False).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), dtype=dtype)


def predict(model: DeepConvLstmModel, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions for ``windows[N, s_w, C]`` in evaluation mode."""
    return np.argmax(predict_logits(model, windows, batch_size), axis=1)


def parameter_inventory(model: DeepConvLstmModel) -> list[InventoryEntry]:
    return [InventoryEntry(name.split(".")[0], name.split(".")[1], tuple(p.shape), p.size)
            for name, p in model.named_parameters()]


def lstm_parameter_total(inventory: list[InventoryEntry]) -> int:
    return sum(e.count for e in inventory if e.layer.startswith("lstm"))
