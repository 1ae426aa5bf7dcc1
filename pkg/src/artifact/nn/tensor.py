"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation executed while a :class:`GradientTape` is active is appended
to that tape; :meth:`GradientTape.gradient` walks the recording backwards.
Leaves that need gradients are registered with :meth:`GradientTape.watch`.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class TapeConsumedError(RuntimeError):
    pass


def _active_tape() -> "GradientTape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """A float64 array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "_parents", "_backward", "_tracked", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._tracked = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p._tracked for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out._tracked = True
        tape._nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class GradientTape:
    """Records operations for one backward pass.

    >>> with GradientTape() as tape:
    ...     w = tape.watch(Tensor([2.0]))
    ...     loss = (w * w).sum()
    >>> tape.gradient(loss, [w])[0]
    array([4.])
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._watched: list[Tensor] = []
        self._consumed = False
        self._prev = None

    def __enter__(self) -> "GradientTape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def watch(self, t) -> Tensor:
        t = as_tensor(t)
        t._tracked = True
        self._watched.append(t)
        return t

    @property
    def consumed(self) -> bool:
        return self._consumed

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each tensor in ``sources``.

        Sources that the loss does not depend on get an all-zero gradient.
        The tape can be used once.
        """
        if self._consumed:
            raise TapeConsumedError("tape already used for a backward pass")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent._tracked:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=np.float64))
        self._nodes.clear()
        return out


def backward(tape: GradientTape, loss: Tensor, params: dict[str, Tensor],
             inputs: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Named-gradient convenience wrapper around :meth:`GradientTape.gradient`."""
    named = dict(params)
    if inputs:
        named.update(inputs)
    grads = tape.gradient(loss, list(named.values()))
    return dict(zip(named.keys(), grads))


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    """max(a, 0); the derivative at exactly 0 is taken as 0."""
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# -- reductions / shape ----------------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def take(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias) -> Tensor:
    """x @ weight.T + bias with weight stored (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), bw)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum; every index of an operand must appear in the other operand or the output."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_idx = spec.split("->")
    ia, ib = ins.split(",")
    return _make(np.einsum(spec, a.data, b.data), (a, b),
                 lambda g: (np.einsum(f"{out_idx},{ib}->{ia}", g, b.data),
                            np.einsum(f"{out_idx},{ia}->{ib}", g, a.data)))


# -- losses / norms --------------------------------------------------------
def row_norm(a, norm: str = "l2") -> Tensor:
    """Per-row l1 or l2 norm of a 2-D tensor; the subgradient at 0 is 0."""
    a = as_tensor(a)
    if norm == "l2":
        out = np.sqrt((a.data * a.data).sum(axis=1))

        def bw(g):
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out[:, None] > 0, a.data / safe[:, None], 0.0) * g[:, None],)
    elif norm == "l1":
        out = np.abs(a.data).sum(axis=1)

        def bw(g):
            return (np.sign(a.data) * g[:, None],)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return _make(out, (a,), bw)


def log_softmax(logits) -> Tensor:
    z = as_tensor(logits)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (z,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def softmax(logits) -> Tensor:
    z = as_tensor(logits)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (z,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets``.

    ``weights`` (per row) lets callers drop rows from the mean; the mean is
    taken over the rows with non-zero weight.
    """
    z = as_tensor(logits)
    n = z.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    denom = w.sum()
    if denom == 0:
        return _make(np.array(0.0), (z,), lambda g: (np.zeros_like(z.data),))
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    safe_t = np.where(w > 0, targets, 0)
    nll = lse - shifted[rows, safe_t]
    out = float((w * nll).sum() / denom)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, safe_t] -= 1.0
        return (g * p * (w / denom)[:, None],)

    return _make(np.array(out), (z,), bw)


def bce_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw scores."""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    x = z.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(np.array(loss.mean()), (z,), lambda g: (g * (p - y) / n,))
