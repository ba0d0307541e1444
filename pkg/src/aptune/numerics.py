"""Small numpy tensor type with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded in order; if
any input requires a gradient the output does too. ``Tape.backward`` walks the
record in reverse, visiting each operation once. Outside a tape nothing is
recorded, which is what inference and the finite-difference oracle use.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "aptune_active_tape", default=None
)


class ContractViolation(RuntimeError):
    """Raised when a caller breaks an operation's precondition in a way that is
    not a plain bad value (e.g. calling backward on a non-scalar)."""


class Tensor:
    """n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.array(data, copy=True)
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # no copy; used for op outputs
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            if self.size != 1:
                raise ContractViolation(f"backward needs a scalar loss, got shape {self.shape}")
            return
        self._tape.backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations (the compute graph).

    Use as a context manager around a forward pass, then call
    :meth:`backward` with the scalar loss.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            _accumulate(rec.output, g)
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            del grads[id(rec.output)]
        # whatever is left are leaves (parameters and inputs)
        produced = {id(r.output) for r in self.records}
        leaves = {}
        for rec in self.records:
            for t in rec.inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            if key in grads:
                _accumulate(t, grads[key])


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _record(op: str, out: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    result = Tensor.wrap(out, requires_grad=bool(tape is not None and needs))
    if result.requires_grad:
        tape.records.append(_Record(op, inputs, result, backward_fn))
        result._tape = tape
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _operand(x, like: Tensor | None = None):
    if isinstance(x, Tensor):
        return x, x.data
    arr = np.asarray(x)
    if like is not None:
        arr = arr.astype(like.dtype, copy=False)
    return None, arr


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    ta, xa = _operand(a, b if isinstance(b, Tensor) else None)
    tb, xb = _operand(b, a if isinstance(a, Tensor) else None)
    out = xa + xb

    def back(g):
        return _unbroadcast(g, xa.shape), _unbroadcast(g, xb.shape)

    return _record("add", out, (ta, tb), back)


def sub(a, b) -> Tensor:
    ta, xa = _operand(a, b if isinstance(b, Tensor) else None)
    tb, xb = _operand(b, a if isinstance(a, Tensor) else None)
    out = xa - xb

    def back(g):
        return _unbroadcast(g, xa.shape), _unbroadcast(-g, xb.shape)

    return _record("sub", out, (ta, tb), back)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (covers vector-over-rows)."""
    ta, xa = _operand(a, b if isinstance(b, Tensor) else None)
    tb, xb = _operand(b, a if isinstance(a, Tensor) else None)
    out = xa * xb

    def back(g):
        return _unbroadcast(g * xb, xa.shape), _unbroadcast(g * xa, xb.shape)

    return _record("mul", out, (ta, tb), back)


def broadcast_rows(vec: Tensor, mat: Tensor) -> Tensor:
    """Multiply each row of ``mat`` (shape [..., n]) by ``vec`` (shape [n])."""
    if vec.data.ndim != 1 or vec.shape[0] != mat.shape[-1]:
        raise ValueError(f"cannot broadcast vector {vec.shape} over rows of {mat.shape}")
    return mul(mat, vec)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()

    def back(g):
        return (_unbroadcast(g, a.shape),)

    return _record("broadcast_to", out, (a,), back)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)

    def back(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (x,), back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0).astype(x.dtype, copy=False)

    def back(g):
        return (g * (x.data > 0),)

    return _record("relu", out, (x,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) axes broadcast like ``np.matmul``."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return _record("reshape", out, (x,), back)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _record("transpose", out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(tensors), back)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (dropping that axis)."""
    out = np.take(x.data, index, axis=axis)

    def back(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record("take", out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(())

    def back(g):
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", out, (x,), back)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype).reshape(())

    def back(g):
        return (np.broadcast_to(g / n, x.shape),)

    return _record("mean", out, (x,), back)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    probability exactly 0. Every row must keep at least one True entry.
    """
    z = x.data
    if np.isnan(z).any():
        raise ValueError("softmax received NaN input")
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm parameters must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _record("layer_norm", out, (x, gain, bias), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record("embedding", out, (table,), back)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows of ``logits`` [N, C]; rows whose target is
    negative are ignored (padding)."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise ValueError("cross_entropy: one target per logits row required")
    keep = targets >= 0
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: no target rows to score")
    if targets[keep].max() >= logits.shape[1]:
        raise ValueError("cross_entropy: target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, targets[rows]].sum() / count
    out = np.asarray(loss, dtype=logits.dtype).reshape(())

    def back(g):
        p = np.exp(logp)
        p[rows, targets[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (g / count),)

    return _record("cross_entropy", out, (logits,), back)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[], float], theta: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` w.r.t. ``theta``.

    ``f`` takes no arguments and reads ``theta.data``, which is perturbed in
    place and restored coordinate by coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = theta.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = float(f())
        flat[j] = orig - eps
        fm = float(f())
        flat[j] = orig
        grad[j] = (fp - fm) / (2.0 * eps)
    return grad.reshape(theta.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
