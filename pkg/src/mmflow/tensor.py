"""Dense float32 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
at least one operand requires a gradient, the result keeps references to its
operands plus a closure computing their adjoints. :func:`backward` orders the
recorded graph topologically, replays the adjoints in reverse and then
releases the graph, so each recorded forward pass can be differentiated once.

Broadcasting is deliberately limited to two cases: a Python scalar, and a
rank-1 "bias row" whose length matches the operand's last axis.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

DTYPE = np.float32
MAX_RANK = 3

_state = threading.local()


def _dt():
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def float64_oracle():
    """Evaluate forward ops in float64 inside the block.

    Only for finite-difference oracles, whose difference quotients would
    otherwise be dominated by float32 rounding of the probed value.
    """
    prev = getattr(_state, "dtype", DTYPE)
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        dt = _dt()
        arr = data if isinstance(data, np.ndarray) and data.dtype == dt else np.array(data, dtype=dt, copy=True)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"shape {arr.shape} must have positive extents")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self._consumed = False

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # --- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(np.ascontiguousarray(data, dtype=_dt()))
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=_dt())
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "row"
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# --- elementwise ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        c = _dt()(b)
        return _result(a.data + c, (a,), lambda g: _accumulate(a, g), "add")
    b = _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g if kind == "same" else _reduce_to_row(g))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        c = _dt()(b)
        return _result(a.data - c, (a,), lambda g: _accumulate(a, g), "sub")
    b = _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g if kind == "same" else -_reduce_to_row(g))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if _is_scalar(b):
        return scale(a, b)
    b = _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def backward(g):
        _accumulate(a, g * b.data)
        gb = g * a.data
        _accumulate(b, gb if kind == "same" else _reduce_to_row(gb))

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = _dt()(c)
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c), "scale")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)

    def backward(g):
        _accumulate(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _result(a.data * s, (a,), backward, "silu")


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)), "tanh")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``scale``, ``silu``, ``tanh``."""
    binary = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    unary = {"silu": silu, "tanh": tanh}
    if op in binary:
        if b is None:
            raise UsageError(f"{op} needs a second operand")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise UsageError(f"unknown elementwise op {op!r}")


# --- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry a leading batch axis; ``b`` is either a shared 2-D matrix
    or batched to match ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise DimensionError(f"batch mismatch between {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.ndim == 2 and gb.ndim == 3:
                gb = gb.sum(axis=0)
            _accumulate(b, gb)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
    return _result(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: _accumulate(a, np.swapaxes(g, -1, -2)), "transpose"
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _result(data, (a,), lambda g: _accumulate(a, g.reshape(src)), "reshape")


# --- row (second-to-last axis) structure --------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), backward, "softmax")


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain`` and ``bias``.

    A row whose entries are all equal normalizes to exactly zero.
    """
    a = _as_tensor(a)
    n = a.shape[-1]
    if n < 2:
        raise DimensionError(f"layer_norm needs at least 2 columns, got {a.shape}")
    for p in (gain, bias):
        if p is not None and p.shape != (n,):
            raise DimensionError(f"affine parameter shape {p.shape} does not match {n} columns")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _dt()(eps))
    xhat = c * inv
    flat = (x.max(axis=-1, keepdims=True) == x.min(axis=-1, keepdims=True))
    xhat = np.where(flat, _dt()(0.0), xhat)
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    parents = tuple(p for p in (a, gain, bias) if p is not None)

    def backward(g):
        dxhat = g * gain.data if gain is not None else g
        if a.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (dxhat - m1 - xhat * m2))
        if gain is not None:
            _accumulate(gain, _reduce_to_row(g * xhat))
        if bias is not None:
            _accumulate(bias, _reduce_to_row(g))

    return _result(y, parents, backward, "layer_norm")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack along the row axis (second to last)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-2] != ref[:-2] or p.shape[-1] != ref[-1]:
            raise DimensionError(f"cannot concatenate rows of {ref} and {p.shape}")
    if len(ref) < 2:
        raise DimensionError(f"concat_rows needs rank >= 2, got {ref}")
    sizes = [p.shape[-2] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accumulate(p, g[..., lo:hi, :])

    return _result(np.concatenate([p.data for p in parts], axis=-2), parts, backward, "concat_rows")


def slice_rows(a: Tensor, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    rows = a.shape[-2] if a.ndim >= 2 else 0
    if length <= 0 or start < 0 or start + length > rows:
        raise DimensionError(f"row slice [{start}, {start + length}) out of range for {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:start + length, :] = g
        _accumulate(a, full)

    return _result(a.data[..., start:start + length, :], (a,), backward, "slice_rows")


def repeat_rows(a: Tensor, count: int) -> Tensor:
    """Insert a row axis of length ``count`` before the last axis: (..., n) -> (..., count, n)."""
    a = _as_tensor(a)
    if a.ndim >= MAX_RANK:
        raise DimensionError(f"repeat_rows would exceed rank {MAX_RANK} for {a.shape}")
    data = np.repeat(np.expand_dims(a.data, -2), count, axis=-2)
    return _result(data, (a,), lambda g: _accumulate(a, g.sum(axis=-2)), "repeat_rows")


# --- reductions and losses -----------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape
    return _result(np.array(a.data.sum(dtype=np.float64), dtype=_dt()), (a,),
                   lambda g: _accumulate(a, np.full(shape, g, dtype=_dt())), "sum")


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    return _result(np.array(a.data.mean(dtype=np.float64), dtype=_dt()), (a,),
                   lambda g: _accumulate(a, np.full(shape, g / n, dtype=_dt())), "mean")


def mse_loss(pred: Tensor, target, weights: np.ndarray | None = None) -> Tensor:
    """Mean squared error; ``weights`` optionally scales each leading-axis slice."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    if weights is None:
        w = None
        sq = diff * diff
    else:
        w = np.asarray(weights, dtype=_dt())
        if pred.ndim == 0 or w.shape != (pred.shape[0],):
            raise DimensionError(f"weights of shape {w.shape} do not match leading axis of {pred.shape}")
        w = w.reshape((-1,) + (1,) * (pred.ndim - 1))
        sq = w * diff * diff
    value = np.array(sq.sum(dtype=np.float64) / n, dtype=_dt())

    def backward(g):
        gd = (_dt()(2.0) * g / _dt()(n)) * diff
        if w is not None:
            gd = gd * w
        _accumulate(pred, gd)
        _accumulate(target, -gd)

    return _result(value, (pred, target), backward, "mse")


# --- reverse pass --------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` and release the graph."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("the recorded graph for this loss was already consumed by backward")
    if loss._backward is None:
        raise UsageError("loss was not produced by recorded ops on tensors requiring grad")
    order = _topological(loss)
    loss.grad = np.ones(loss.shape, dtype=_dt())
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad if node.grad is not None else np.zeros(node.shape, dtype=_dt())
        node._backward(g)
        node.grad = None
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# --- optimizer -----------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Gradients are read from each parameter's ``.grad``.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    step_size = DTYPE(lr / c1)
    root_c2 = DTYPE(np.sqrt(c2))
    decay = DTYPE(1.0 - lr * state.weight_decay)
    eps = DTYPE(state.eps)
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise UsageError(f"optimizer moments for {name} have shape {m.shape}, parameter has {p.shape}")
        m = DTYPE(b1) * m + DTYPE(1.0 - b1) * g
        v = DTYPE(b2) * v + DTYPE(1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data * decay - step_size * m / (np.sqrt(v) / root_c2 + eps)


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step`."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adamw_step(self.params, self.state, lr)


def parameters_from(tensors: Iterable[Tensor]) -> dict[str, Tensor]:
    return {str(i): t for i, t in enumerate(tensors)}
