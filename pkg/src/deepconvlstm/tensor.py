"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive that touches a tensor with ``requires_grad`` appends one
record to the active :class:`Tape`.  Records are appended in creation order,
so the tape is already topologically sorted and ``backward`` only has to walk
it in reverse.

Usage::

    with Tape() as tape:
        loss = softmax_cross_entropy_weighted(model(x), y, w)
        tape.backward(loss)

Without an explicit ``Tape`` context the ops are recorded on a per-thread
default tape, which is convenient in tests but grows without bound in loops.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, LabelError, NonFiniteError, ShapeError

_state = threading.local()


def _get(name, default):
    if not hasattr(_state, name):
        setattr(_state, name, default() if callable(default) else default)
    return getattr(_state, name)


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError("dtype", f"only float32 and float64 are supported, got {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision of newly created tensors."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def set_debug_checks(enabled: bool) -> None:
    """Turn the NaN/Inf health check on every op result on or off (off by default)."""
    _state.check_finite = bool(enabled)


@contextlib.contextmanager
def no_grad():
    old = _get("grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """An n-dimensional array plus optional gradient buffer.

    ``data`` is a numpy array and is treated as immutable once created; only
    ``grad`` is mutated (by ``backward``) and parameter values are replaced in
    place by the optimizer.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Op | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_(self)


@dataclass(eq=False)
class _Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"
    index: int


class Tape:
    """Ordered record of primitive operations.

    Can be used as a context manager to make it the active recording target
    for the current thread.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, name, inputs, output, backward_fn) -> _Op:
        op = _Op(name, tuple(inputs), output, backward_fn, self, len(self.ops))
        self.ops.append(op)
        return op

    def clear(self) -> None:
        for op in self.ops:
            op.output._node = None
        self.ops = []

    def __enter__(self) -> "Tape":
        _get("tapes", list).append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

        Leaf gradients accumulate across calls; call ``zero_grad`` on the
        leaves first for exact gradients.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", type(loss).__name__)
            raise ShapeError(f"backward() needs a scalar loss, got shape {shape}")
        if loss._node is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        if loss._node.tape is not self:
            raise ShapeError("loss was not recorded on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops[: loss._node.index + 1]):
            g = pending.pop(id(op.output), None)
            if g is None:
                continue
            for inp, ig in zip(op.inputs, op.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate_leaf(inp, ig)
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = ig if prev is None else prev + ig


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def current_tape() -> Tape:
    tapes = _get("tapes", list)
    if tapes:
        return tapes[-1]
    return _get("default_tape", Tape)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss`` on the tape that produced it."""
    if isinstance(loss, Tensor) and loss._node is not None:
        loss._node.tape.backward(loss)
    else:
        current_tape().backward(loss)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = get_default_dtype()
    return Tensor(x, dtype=dtype)


def _result(name, data, inputs, backward_fn) -> Tensor:
    needs = _get("grad_enabled", True) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = current_tape().record(name, inputs, out, backward_fn)
    if _get("check_finite", False) and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _result("add", data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _result("sub", data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _result("mul", data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product of ``a[m, k]`` and ``b[k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T if a.requires_grad else None,
                              a.data.T @ g if b.requires_grad else None))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout_p", f"must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("rng", "dropout in training mode needs an explicit random generator")
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * scale
    return _result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _result("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _result("getitem", x.data[index], (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: all inputs need one shape, got {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result("stack", data, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def sum_(x) -> Tensor:
    x = as_tensor(x)
    return _result("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _result("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def conv2d_valid(x, kernels, bias) -> Tensor:
    """Stride-1, unpadded convolution along the time axis.

    ``x`` is ``[B, Cin, T, W]``, ``kernels`` ``[Cout, Cin, k, 1]``, ``bias``
    ``[Cout]``; the result is ``[B, Cout, T-k+1, W]``.  The sensor axis ``W``
    is never mixed.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[3] != 1:
        raise ShapeError(f"conv2d_valid: expected input [B,Cin,T,W] and kernels [Cout,Cin,k,1], "
                         f"got {x.shape} and {kernels.shape}")
    B, cin, T, W = x.shape
    cout, kcin, k, _ = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d_valid: input has {cin} channels, kernels expect {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_valid: bias shape {bias.shape} does not match {cout} filters")
    if T < k:
        raise ShapeError(f"conv2d_valid: window too short, time extent {T} < kernel length {k}")
    t_out = T - k + 1
    # cols[b, t, w, c*k + j] = x[b, c, t + j, w]
    cols = sliding_window_view(x.data, k, axis=2).transpose(0, 2, 3, 1, 4).reshape(B * t_out * W, cin * k)
    kmat = kernels.data.reshape(cout, cin * k)
    out = (cols @ kmat.T + bias.data).reshape(B, t_out, W, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gm.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ kmat).reshape(B, t_out, W, cin, k).transpose(0, 3, 1, 2, 4)
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx[:, :, j:j + t_out, :] += dcols[..., j]
        return gx, gk, gb

    return _result("conv2d_valid", np.ascontiguousarray(out), (x, kernels, bias), bw)


def softmax_cross_entropy_weighted(logits, targets, weights) -> Tensor:
    """Class-weighted mean cross-entropy of ``logits[B, K]`` against integer targets.

    loss = sum_b w[t_b] * -log softmax(z_b)[t_b] / sum_b w[t_b]
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, K], got {logits.shape}")
    B, K = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != B:
        raise ShapeError(f"{B} logit rows but {targets.shape[0]} targets")
    bad = np.flatnonzero((targets < 0) | (targets >= K))
    if bad.size:
        raise LabelError(f"target {targets[bad[0]]} in row {bad[0]} is outside [0, {K})")
    targets = targets.astype(np.intp)
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=logits.dtype)
    if w.shape != (K,):
        raise ShapeError(f"weights must have shape ({K},), got {w.shape}")
    if np.any(w <= 0):
        raise ConfigError("class_weights", "weights must be strictly positive")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1)
    rows = np.arange(B)
    nll = np.log(s) - z[rows, targets]
    wt = w[targets]
    total = wt.sum()
    loss = np.asarray((wt * nll).sum() / total, dtype=logits.dtype)

    def bw(g):
        grad = e / s[:, None]
        grad[rows, targets] -= 1.0
        grad *= (wt / total)[:, None]
        return (grad * g,)

    return _result("softmax_cross_entropy", loss, (logits,), bw)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax probabilities (no gradient tracking)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
