"""Dense f64 tensors with a reverse-mode tape.

Every op checks its forward result for NaN/Inf. Ops only record onto the
tape when a :class:`Tape` is active (``with Tape() as tape:``) and at least
one input requires a gradient, so forward-only scoring runs without any
bookkeeping. The active tape is held in a context variable, so separate
threads can each drive their own tape.
"""

from __future__ import annotations

import contextvars
import hashlib
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "rticlab_active_tape", default=None)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        value = np.array(value, dtype=np.float64)
        if value.ndim > 3:
            raise ShapeError(f"rank {value.ndim} > 3 is not supported")
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self.grad += g

    def numpy(self):
        return self.value

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed ops; ``backward`` replays it in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
        loss.accumulate(np.ones_like(loss.value))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is not None and t.requires_grad:
                    t.accumulate(gi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(value, opname):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite result in {opname}")


def _emit(value, opname, inputs, backward):
    _check_finite(value, opname)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs_grad)
    tape = _ACTIVE_TAPE.get()
    if needs_grad and tape is not None:
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")
    av, bv = a.value, b.value
    return _emit(av * bv, "hadamard", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.value * c, "scalar_mul", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of rank 1-3 and b of rank 2."""
    a, b = as_tensor(a), as_tensor(b)
    if b.value.ndim != 2 or a.value.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ bv.T
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(av @ bv, "matmul", (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(value, "concat", tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.value)
    return _emit(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _emit(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # relu'(0) = 0
    on = a.value > 0
    return _emit(np.where(on, a.value, 0.0), "relu", (a,), lambda g: (g * on,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit(y, "softmax", (a,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise NumericError("l2_normalize: zero-norm input")
    y = a.value / norm
    return _emit(y, "l2_normalize", (a,),
                 lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,))


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.value.sum(axis=axis), "sum", (a,), backward)


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.value.size if axis is None else shape[axis]

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit(a.value.mean(axis=axis), "mean", (a,), backward)


def getitem(a, index) -> Tensor:
    """Basic slicing (ints and slices); the slice primitive."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _emit(a.value[index].copy(), "slice", (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _emit(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def take_rows(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add into used rows."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.value[idx], "take_rows", (table,), backward)


def masked_max(a, mask, axis: int = -1) -> Tensor:
    """Max over ``axis`` restricted to positions where ``mask`` is true.

    Ties go to the first position. A slice with no admissible position is
    an error.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=axis).all():
        raise ShapeError("masked_max: a reduced slice has no unmasked entries")
    filled = np.where(mask, a.value, -np.inf)
    arg = np.expand_dims(filled.argmax(axis=axis), axis)
    value = np.take_along_axis(a.value, arg, axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, arg, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _emit(value, "masked_max", (a,), backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor],
                      eps: float = 1e-6, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar from the current values of ``params``. With
    ``max_coords`` set, that many coordinates per tensor are drawn with a
    seeded generator instead of scanning every one.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
        p.requires_grad = True
    with Tape() as tape:
        out = f()
        tape.backward(out)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    def evaluate():
        v = f().value
        if not np.all(np.isfinite(v)):
            raise NumericError("finite_diff_check: non-finite objective")
        return float(v)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = evaluate()
            flat[c] = orig - eps
            down = evaluate()
            flat[c] = orig
            g_fd = (up - down) / (2.0 * eps)
            a = g_ad.reshape(-1)[c]
            err = abs(a - g_fd) / max(1e-12, abs(a) + abs(g_fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: Mapping[str, Tensor], path, config_hash: str):
    lines = [f"# config_hash={config_hash}"]
    for name, t in params.items():
        shape = ",".join(str(n) for n in t.shape)
        values = ",".join(repr(float(v)) for v in t.value.reshape(-1))
        lines.append(f"{name}\t{shape}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, Tensor], str]:
    params = {}
    config_hash = ""
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.startswith("# config_hash="):
            config_hash = line.split("=", 1)[1]
            continue
        if not line.strip():
            continue
        try:
            name, shape, values = line.split("\t")
            dims = tuple(int(n) for n in shape.split(",")) if shape else ()
            arr = np.array([float(v) for v in values.split(",")] if values else [])
            params[name] = Tensor(arr.reshape(dims), requires_grad=True, name=name)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed checkpoint line ({exc})") from None
    return params, config_hash


def params_digest(params: Mapping[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.value).tobytes())
    return h.hexdigest()
