"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :meth:`Tape.backward` walks that record in reverse and accumulates
gradients.  Outside a tape nothing is recorded, which is how the gradient-free
code paths (evaluation, activation baseline) stay cheap.

    >>> x = Tensor([2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(x * x)
    >>> tape.backward(loss)
    >>> x.grad.tolist()
    [4.0, 6.0]
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, ShapeError

DTYPE = np.float32
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """An n-dimensional float array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires-grad tensor that ``loss`` depends on.

        Leaf gradients accumulate across calls; intermediate gradients are
        overwritten.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward called on an empty tape")
        produced = {id(n.out) for n in self.nodes}
        pending: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for node in reversed(self.nodes):
            entry = pending.pop(id(node.out), None)
            if entry is None:
                continue
            g = entry[1]
            node.out.grad = g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = (t, pending[key][1] + gi)
                else:
                    pending[key] = (t, gi)
        for key, (t, g) in pending.items():
            if key in produced:
                continue
            t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run backward on ``tape`` (default: the innermost active tape)."""
    if tape is None:
        stack = _tape_stack()
        if not stack:
            raise ContractError("backward needs a tape; pass one or call inside `with Tape()`")
        tape = stack[-1]
    tape.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], fn) -> Tensor:
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].nodes.append(_Node(out, inputs, fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = DTYPE(b)
        out = Tensor(a.data * c)
        return _record(out, (a,), lambda g: (g * c,))
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(Tensor(y), (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _record(Tensor(np.log(x.data)), (x,), lambda g: (g / x.data,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF (not the tanh approximation)."""
    cdf = ndtr(x.data)
    out = Tensor(x.data * cdf)

    def fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * DTYPE(_INV_SQRT_2PI)
        return (g * (cdf + x.data * pdf),)

    return _record(out, (x,), fn)


# --- shape -----------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


# --- reductions ------------------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data, dtype=DTYPE))
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(DTYPE),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.mean(x.data, dtype=DTYPE))
    return _record(out, (x,), lambda g: (np.full(x.shape, g / DTYPE(n), dtype=DTYPE),))


# --- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is shared across every leading index of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        # fold leading axes into one GEMM; np.matmul's stacked path is much slower here
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = Tensor((a2 @ b.data).reshape(*a.shape[:-1], n))

        def fn(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _record(out, (a, b), fn)

    out = Tensor(np.matmul(a.data, b.data))

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), fn)


# --- normalisation ---------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(Tensor(s), (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = DTYPE(1.0) / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _record(out, (x, gain, bias), fn)


def cross_entropy(logits: Tensor, target, smoothing: float = 0.0) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows.

    ``logits`` is ``[vocab]`` with an int target, or ``[n, vocab]`` with ``n``
    targets.  With ``smoothing`` > 0 the target distribution becomes
    ``(1 - smoothing) * onehot + smoothing / vocab``.
    """
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    vocab = z.shape[-1]
    if tgt.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {tgt.shape[0]} targets for {z.shape[0]} rows")
    if np.any(tgt < 0) or np.any(tgt >= vocab):
        raise IndexError(f"cross_entropy: target out of range for vocab size {vocab}")
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(z.shape[0])
    nll = -logp[rows, tgt]
    if smoothing:
        nll = (1.0 - smoothing) * nll - smoothing * logp.mean(axis=-1)
    out = Tensor(nll.mean(dtype=DTYPE))

    def fn(g):
        p = np.exp(logp)
        if smoothing:
            p -= smoothing / vocab
        p[rows, tgt] -= 1.0 - smoothing
        grad = p * (g / DTYPE(z.shape[0]))
        return (grad.reshape(logits.shape),)

    return _record(out, (logits,), fn)


# --- indexing --------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record(out, (table,), fn)


def take_rows(x: Tensor, rows) -> Tensor:
    """Select rows of a 2-D tensor."""
    return embedding(x, rows)


def pick(x: Tensor, idx) -> Tensor:
    """``out[n] = x[n, idx[n]]`` for a 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, idx])

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _record(out, (x,), fn)


def override_rows(x: Tensor, rows, scale, setmask, setval) -> Tensor:
    """Rewrite selected rows of a 2-D tensor elementwise.

    ``out[rows] = where(setmask, setval, x[rows] * scale)``; every other row is
    passed through untouched.
    """
    rows = np.asarray(rows, dtype=np.int64)
    data = x.data.copy()
    data[rows] = np.where(setmask, setval, x.data[rows] * scale).astype(DTYPE)

    def fn(g):
        gx = g.copy()
        gx[rows] = np.where(setmask, DTYPE(0.0), g[rows] * scale)
        return (gx,)

    return _record(Tensor(data), (x,), fn)


def replace_rows(x: Tensor, rows, values: Tensor) -> Tensor:
    """Replace selected rows of a 2-D tensor by ``values`` (gradient flows to ``values``)."""
    rows = np.asarray(rows, dtype=np.int64)
    if values.shape != (len(rows), x.shape[1]):
        raise ShapeError(f"replace_rows: values {values.shape} for {len(rows)} rows of {x.shape}")
    data = x.data.copy()
    data[rows] = values.data

    def fn(g):
        gx = g.copy()
        gx[rows] = 0.0
        return gx, g[rows]

    return _record(Tensor(data), (x, values), fn)
