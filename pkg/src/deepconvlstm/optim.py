"""Adam with L2 weight decay and inverse-frequency class weights."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = False
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None] | None = None) -> None:
    """One Adam update in place.

    With ``decoupled=False`` the decay is folded into the gradient
    (``g + wd*theta``) before the moment updates; with ``decoupled=True`` it is
    applied directly to the weights as in AdamW.  ``grads`` defaults to each
    parameter's ``.grad``; a missing gradient counts as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ShapeError(f"optimizer tracks {len(state.m)} tensors, got {len(params)} params / {len(grads)} grads")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"optimizer moment shape {m.shape} != parameter shape {p.shape}")
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            update = update + state.weight_decay * p.data
        p.data = (p.data - state.lr * update).astype(p.dtype, copy=False)


def class_weights(labels, num_classes: int) -> np.ndarray:
    """``N / (K * n_c)`` per class; classes without samples get the largest present weight."""
    labels = np.asarray(labels).reshape(-1)
    if num_classes < 2:
        raise ConfigError("num_classes", f"need at least 2 classes, got {num_classes}")
    if labels.size == 0:
        raise DataError("cannot compute class weights from an empty label sequence")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(labels.astype(np.intp), minlength=num_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = labels.size / (num_classes * counts[present])
    w[~present] = w[present].max()
    return w
