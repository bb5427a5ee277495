"""Minimal reverse-mode autodiff over dense float64 arrays.

Operations executed inside an active :class:`Tape` are recorded together with
closures computing their local vector-Jacobian products.  Outside a tape the
same functions are plain numpy evaluations, which is what scoring code uses.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(w, w))
    >>> tape.backward(loss)
    >>> w.grad
    array([[4.]])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """An operation produced or received non-finite values."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of a tape (double backward, non-scalar loss, foreign tensor)."""


class GradientStateError(RuntimeError):
    """An optimizer step was requested for a parameter without a gradient."""


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms below are the canonical API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records operations for a single backward pass.

    Use as a context manager; tapes nest per thread.  A tape can be consumed
    once, either by :meth:`backward` or :meth:`gradient`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
        if self.consumed:
            raise TapeError("recording onto a consumed tape")
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, inputs, vjp))
        return out

    def _propagate(self, loss: Tensor) -> dict:
        if self.consumed:
            raise TapeError("backward already run on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not self._tracks(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._tape is not self:
                    leaves[key] = inp
        return {k: (leaves[k], grads[k]) for k in leaves if k in grads}

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        for leaf, g in self._propagate(loss).values():
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad = leaf.grad + g

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Return gradients for ``wrt`` without touching any ``.grad`` slot."""
        found = self._propagate(loss)
        return [found[id(t)][1] if id(t) in found else np.zeros_like(t.data) for t in wrt]


def _emit(arr: np.ndarray, inputs: tuple, vjp: Callable, name: str) -> Tensor:
    _check_finite(arr, name)
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over a matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    raise DimensionError(f"add: cannot combine {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data + c, (a,), lambda g: (g,), "add_scalar")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericError("log of non-positive value")
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / max(a.size, 1))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def take_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"take_cols[{start}:{stop}] on {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.data[:, start:stop].copy(), (a,), vjp, "take_cols")


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx].copy(), (a,), vjp, "take_rows")


def row_normalize(a) -> Tensor:
    """Rescale each row to unit L2 norm."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("row_normalize expects a matrix")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if (norms == 0).any():
        raise NumericError("row_normalize of a zero row")
    u = a.data / norms

    def vjp(g):
        return ((g - u * (g * u).sum(axis=1, keepdims=True)) / norms,)

    return _emit(u, (a,), vjp, "row_normalize")


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``p == 0``."""
    a = as_tensor(a)
    if p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _emit(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# softmax family


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(logits, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``logits / temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = as_tensor(logits)
    _check_finite(x.data, "softmax input")
    z = x.data / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / temperature,)

    return _emit(p, (x,), vjp, "softmax")


def log_softmax(logits, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = as_tensor(logits)
    _check_finite(x.data, "log_softmax input")
    z = x.data / temperature
    out = z - _logsumexp_rows(z)
    p = np.exp(out)

    def vjp(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _emit(out, (x,), vjp, "log_softmax")


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Fused ``-log softmax(logits)[label]``.

    ``logits`` is ``[n]`` with an integer label, or ``[B, n]`` with ``B`` labels.
    """
    x = as_tensor(logits)
    _check_finite(x.data, "cross_entropy input")
    single = x.data.ndim == 1
    z = x.data.reshape(1, -1) if single else x.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise DimensionError(f"{y.shape[0]} labels for {z.shape[0]} rows")
    if (y < 0).any() or (y >= z.shape[1]).any():
        raise IndexError(f"label out of range for {z.shape[1]} classes")
    rows = np.arange(z.shape[0])
    logp = z - _logsumexp_rows(z)
    per = -logp[rows, y]
    if reduction == "mean":
        c = 1.0 / z.shape[0]
    elif reduction == "sum":
        c = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    p = np.exp(logp)

    def vjp(g):
        d = p.copy()
        d[rows, y] -= 1.0
        d *= float(g) * c
        return (d.reshape(x.shape),)

    return _emit(np.array(per.sum() * c), (x,), vjp, "cross_entropy")


def soft_cross_entropy(student_logits, teacher_probs, temperature: float) -> Tensor:
    """Batch-mean ``-sum_j q_j log softmax(s / T)_j``, scaled by ``T**2``.

    ``teacher_probs`` is a constant array; the ``T**2`` factor keeps the
    gradient magnitude roughly temperature independent.
    """
    s = as_tensor(student_logits)
    q = np.asarray(teacher_probs, dtype=np.float64)
    if q.shape != s.shape:
        raise DimensionError(f"teacher {q.shape} vs student {s.shape}")
    logp = log_softmax(s, temperature)
    n = s.shape[0] if s.data.ndim == 2 else 1
    return scale(sum_all(mul(logp, Tensor._wrap(q))), -(temperature**2) / n)


# ---------------------------------------------------------------------------
# optimisation helpers


def grad_wrt_input(fn: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Exact gradient of the scalar ``fn(x)`` with respect to ``x``.

    Parameters reached by ``fn`` keep their ``.grad`` slots untouched.
    """
    xt = Tensor(np.array(as_tensor(x).data), requires_grad=True)
    with Tape() as tape:
        obj = fn(xt)
    if obj._tape is not tape:
        raise TapeError("objective does not depend on the input through taped ops")
    return tape.gradient(obj, [xt])[0]


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """In-place ``theta <- theta - lr * (grad + weight_decay * theta)``; clears grads."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise GradientStateError(f"parameter {p!r} has no gradient")
    for p in params:
        g = p.grad if weight_decay == 0.0 else p.grad + weight_decay * p.data
        upd = p.data - lr * g
        _check_finite(upd, "sgd update")
        p.data = upd
        p.grad = None

