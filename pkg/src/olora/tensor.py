"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op records a node on the thread's active :class:`Tape`
when at least one input requires a gradient.  ``backward(loss)`` replays the
tape in reverse, accumulating ``.grad`` on leaf tensors, and then retires it.

Storage is float32 by default.  Passing ``dtype=np.float64`` (or calling
:meth:`Tensor.astype`) gives the 64-bit shadow mode used by gradient checks;
ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> "Tape":
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording anything on the tape."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _raise_nonscalar(shape):
    raise ShapeError(f"expected a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of op nodes for one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        self.nodes.append(node)
        node.output._tape = self

    def __len__(self) -> int:
        return len(self.nodes)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by tensor op")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tape().record(Node(inputs, out, rule))
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float32), dtype=dtype or np.float32)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad and loss.grad is None:
            # a leaf used directly as a loss
            loss.grad = np.ones_like(loss.data)
        return
    if tape.consumed:
        raise TapeError("backward already called on this tape; run a new forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t._tape is tape:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            else:
                t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
    tape.nodes.clear()
    if getattr(_state, "tape", None) is tape:
        _state.tape = None


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _result(A @ B, (a, b), rule)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over a leading batch axis: (n,m,k) x (n,k,p)."""
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        ga = g @ B.transpose(0, 2, 1) if a.requires_grad else None
        gb = A.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ga, gb

    return _result(A @ B, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D bias to every row of ``x``; the only broadcasting op."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias shape {bias.shape} does not fit rows of {x.shape}")

    def rule(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return _result(x.data + bias.data, (x, bias), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c_arr = x.data.dtype.type(c)
    return _result(x.data * c_arr, (x,), lambda g: (g * c_arr,))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if x.data.ndim != 2:
            raise ShapeError(f"default transpose needs a matrix, got {x.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows ``table[index]`` (embedding lookup); gradient scatters back."""
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def rule(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _result(table.data[idx], (table,), rule)


embedding = take_rows


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by subtracting the row max."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), rule)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs [m, V] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m, V = logits.shape
    if t.shape[0] != m:
        raise ShapeError(f"{t.shape[0]} targets for {m} rows of logits")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target index out of range for {V} classes")
    logp = _log_softmax(logits.data)
    rows = np.arange(m)
    loss = -logp[rows, t].mean()

    def rule(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g / m),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), rule)


def frobenius_sq(x: Tensor) -> Tensor:
    X = x.data
    return _result(np.asarray((X * X).sum(), dtype=X.dtype), (x,), lambda g: (2.0 * g * X,))


def sum_all(x: Tensor) -> Tensor:
    X = x.data
    return _result(np.asarray(X.sum(), dtype=X.dtype), (x,),
                   lambda g: (np.broadcast_to(g, X.shape).copy(),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``x`` over its last axis, then scale and shift."""
    X = x.data
    n = X.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not fit {x.shape}")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * inv
    G = gamma.data

    def rule(g):
        gxh = g * G
        gx = inv / n * (n * gxh - gxh.sum(axis=-1, keepdims=True)
                        - xhat * (gxh * xhat).sum(axis=-1, keepdims=True))
        flat = g.reshape(-1, n)
        return gx, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return _result(xhat * G + beta.data, (x, gamma, beta), rule)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    X = x.data
    c = X.dtype.type(_GELU_C)
    k = X.dtype.type(0.044715)
    u = c * (X + k * X ** 3)
    th = np.tanh(u)
    out = 0.5 * X * (1.0 + th)

    def rule(g):
        du = c * (1.0 + 3.0 * k * X * X)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th * th) * du),)

    return _result(out.astype(X.dtype), (x,), rule)
