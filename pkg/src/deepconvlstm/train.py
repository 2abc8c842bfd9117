"""Mini-batch training loop."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import WindowedDataset
from .errors import ConfigError, DataError, DivergenceError
from .metrics import compute_metrics
from .model import DeepConvLstmModel, forward, predict_logits
from .optim import AdamState, adam_step, class_weights

# sub-stream ids for SeedSequence([seed, stream, ...])
_SHUFFLE_STREAM = 1
_DROPOUT_STREAM = 2


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 30
    batch_size: int = 100
    seed: int = 1
    shuffle: bool = True
    loss_weighting: str = "inverse_frequency"  # or "none"
    lr: float = 1e-4
    weight_decay: float = 1e-6
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs", f"must be an integer >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size", f"must be an integer >= 1, got {self.batch_size!r}")
        if self.loss_weighting not in ("inverse_frequency", "none"):
            raise ConfigError("loss_weighting", f"must be 'inverse_frequency' or 'none', got {self.loss_weighting!r}")
        if self.lr <= 0:
            raise ConfigError("lr", f"must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train: dict[str, float]
    validation: dict[str, float] | None
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingTrace:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def epoch_seconds(self) -> list[float]:
        return [e.seconds for e in self.epochs]

    def to_jsonl(self, header: dict | None = None) -> str:
        """One JSON object per line; the optional header comes first as ``{"record": "config", ...}``."""
        lines = []
        if header is not None:
            lines.append(json.dumps({"record": "config", **header}, sort_keys=True))
        lines += [json.dumps({"record": "epoch", **e.to_dict()}, sort_keys=True) for e in self.epochs]
        return "\n".join(lines) + "\n"


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _metric_summary(model, data: WindowedDataset, weights: np.ndarray) -> dict[str, float]:
    """Metrics plus the weighted loss, all in evaluation mode (no dropout)."""
    logits = predict_logits(model, data.windows)
    summary = compute_metrics(data.labels, np.argmax(logits, axis=1), model.config.num_classes).summary()
    with T.no_grad():
        summary["loss"] = float(T.softmax_cross_entropy_weighted(T.Tensor(logits), data.labels, weights).data)
    return summary


def train_epochs(model: DeepConvLstmModel, train_set: WindowedDataset, cfg: TrainRunConfig,
                 val_set: WindowedDataset | None = None, evaluate_train: bool = True,
                 state: AdamState | None = None, log=None) -> TrainingTrace:
    """Train ``model`` in place and return the per-epoch trace.

    ``seconds`` in each record covers the optimisation loop only, not the
    metric passes.
    """
    if len(train_set) == 0:
        raise DataError("training set contains no windows")
    K = model.config.num_classes
    weights = (class_weights(train_set.labels, K) if cfg.loss_weighting == "inverse_frequency"
               else np.ones(K))
    params = model.parameters()
    dtype = params[0].dtype
    if state is None:
        state = AdamState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                                     decoupled=cfg.decoupled_weight_decay)
    weights = weights.astype(dtype)
    windows = np.asarray(train_set.windows, dtype=dtype)[:, None, :, :]
    labels = train_set.labels
    dropout_rng = np.random.default_rng([cfg.seed, _DROPOUT_STREAM])

    trace = TrainingTrace()
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng = np.random.default_rng([cfg.seed, _SHUFFLE_STREAM, epoch]) if cfg.shuffle else None
        total, seen = 0.0, 0
        start = time.perf_counter()
        for b, idx in enumerate(iterate_batches(len(labels), cfg.batch_size, shuffle_rng)):
            model.zero_grad()
            with T.Tape() as tape:
                logits = forward(model, windows[idx], training=True, rng=dropout_rng)
                loss = T.softmax_cross_entropy_weighted(logits, labels[idx], weights)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, batch {b}", epoch, b)
                tape.backward(loss)
            adam_step(state, params)
            total += value * len(idx)
            seen += len(idx)
        seconds = time.perf_counter() - start
        record = EpochRecord(
            epoch=epoch,
            loss=total / seen,
            train=_metric_summary(model, train_set, weights) if evaluate_train else {},
            validation=_metric_summary(model, val_set, weights) if val_set is not None and len(val_set) else None,
            seconds=seconds,
        )
        trace.epochs.append(record)
        if log is not None:
            log(record)
    return trace
