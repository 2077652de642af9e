"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` (a
per-thread context). Outside a tape, ops run eagerly and record nothing,
which is the inference path.

    with Tape() as tape:
        loss = sum_all(softmax(x) * softmax(x))
    tape.backward(loss)
    x.grad
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Each entry is ``(output, inputs, backward_fn)``; entries are appended
    as ops execute, so inputs always precede the ops that consume them.
    """

    def __init__(self):
        self.entries: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self.entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients are added to any existing ``.grad``; call ``zero_grad`` to reset.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad tensor")

    # id -> [tensor, summed gradient]; local so that replaying a tape does not
    # feed stale intermediate gradients back into the propagation.
    pending: dict = {id(loss): [loss, np.ones_like(loss.data)]}
    for out, inputs, fn in reversed(tape.entries):
        slot = pending.get(id(out))
        if slot is None:
            continue
        in_grads = fn(slot[1])
        for inp, g in zip(inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            cur = pending.get(id(inp))
            if cur is None:
                pending[id(inp)] = [inp, np.array(g, dtype=np.float64)]
            else:
                cur[1] = cur[1] + g
    for tensor, g in pending.values():
        tensor.accumulate_grad(g)


def _result(data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg, copy=False)
    if rg:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # leading axes added by matmul batching
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    # size-1 axes may stretch, but ranks must agree (no rank promotion)
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch between {a.shape} and {b.shape}")
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes.

    A 2-D right operand is shared across the batch of a 3-D left operand,
    and its gradient is summed over that batch.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul cannot batch the right operand only: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


# -- reductions ------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = axis % a.ndim

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        return scale(sum_all(a), 1.0 / a.data.size)
    return scale(sum_axis(a, axis, keepdims), 1.0 / a.shape[axis])


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis, kept as a size-1 axis."""
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, a.data / safe, 0.0) * g,)

    return _result(n, (a,), bw)


# -- softmax and losses ----------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


softmax_lastdim = softmax


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy needs [N x C] logits and N labels, got {logits.shape} and {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss), (logits,), bw)


# -- structural ------------------------------------------------------------------

def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def index(a: Tensor, key) -> Tensor:
    basic = _is_basic_key(key)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[key] += g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _result(np.array(a.data[key]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def straight_through(forward_value, source: Tensor) -> Tensor:
    """Emit ``forward_value`` but route the incoming gradient to ``source`` unchanged."""
    value = np.asarray(forward_value, dtype=np.float64)
    if value.shape != source.shape:
        raise ShapeError(f"straight_through: value {value.shape} vs source {source.shape}")
    return _result(value.copy(), (source,), lambda g: (g,))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


# -- verification ----------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``f`` is called once under a tape for the analytic gradient and then
    twice per coordinate without a tape; ``x`` itself is not modified.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
    tape.backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    worst = 0.0
    for idx in np.ndindex(base.shape):
        hi = base.copy()
        hi[idx] += eps
        lo = base.copy()
        lo[idx] -= eps
        numeric = (f(Tensor(hi)).item() - f(Tensor(lo)).item()) / (2.0 * eps)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
