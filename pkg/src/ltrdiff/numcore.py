"""Dense tensors with define-by-run reverse-mode differentiation.

Every op reads the values of its inputs, computes an output ``Tensor`` and,
when a ``Tape`` is active and some input requires a gradient, appends a node
holding a closure that maps the output gradient to input gradients.  Nodes are
appended in creation order, so walking them backwards is a valid reverse
topological order.

    with Tape() as tape:
        loss = mean(square(sub(matmul(x, w), y)))
    grads = backward(loss, tape, [w])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class TapeError(RuntimeError):
    """Tape misuse: non-scalar loss or a second backward pass."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records ops executed while it is the active tape on this thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _emit(values: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=requires)
    tape = active_tape()
    if requires and tape is not None:
        tape.nodes.append(_Node(out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.values * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    av = a.values
    return _emit(av * av, (a,), lambda g: (2.0 * av * g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _emit(
        av @ bv,
        (a, b),
        lambda g: (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None),
    )


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(x: Tensor) -> Tensor:
    xv = x.values
    s = sigmoid_values(xv)
    return _emit(xv * s, (x,), lambda g: (g * s * (1.0 + xv * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    xv = x.values
    out = np.maximum(xv, 0.0) + np.log1p(np.exp(-np.abs(xv)))
    return _emit(out, (x,), lambda g: (g * sigmoid_values(xv),))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gv = gain.values
    d = xv.shape[-1]

    def backward(g):
        gxhat = g * gv
        gx = inv / d * (
            d * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _emit(xhat * gv + bias.values, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity (the same object) outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit(x.values * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# reductions and reshaping


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _emit(
        np.asarray(x.values.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def row_sum(x: Tensor) -> Tensor:
    """Sum over the last axis: [batch, d] -> [batch]."""
    shape = x.shape
    return _emit(
        x.values.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),)
    )


def dot(x: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted sum of a vector against constant weights."""
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != x.shape:
        raise ShapeError(f"dot: weights {w.shape} vs tensor {x.shape}")
    return _emit(np.asarray(x.values @ w), (x,), lambda g: (g * w,))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), backward)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _emit(x.values[:, start:stop], (x,), backward)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _emit(x.values[start:stop], (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(x.values.reshape(-1), (x,), lambda g: (g.reshape(shape),))


# ----------------------------------------------------------------------------
# classification losses


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_values(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_values(logits))


def cross_entropy_rows(logits: Tensor, target_index) -> Tensor:
    """Per-row negative log-likelihood, shape [batch]."""
    lv = logits.values
    if lv.ndim != 2:
        raise ShapeError(f"cross entropy expects [batch, C] logits, got {lv.shape}")
    target = np.asarray(target_index, dtype=np.int64).reshape(-1)
    n, c = lv.shape
    if target.shape[0] != n:
        raise ShapeError(f"{target.shape[0]} targets for {n} rows")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise IndexError(f"target index outside [0, {c})")
    logp = log_softmax_values(lv)
    idx = np.arange(n)

    def backward(g):
        grad = np.exp(logp)
        grad[idx, target] -= 1.0
        return (grad * g[:, None],)

    return _emit(-logp[idx, target], (logits,), backward)


def softmax_cross_entropy(logits: Tensor, target_index) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    return mean(cross_entropy_rows(logits, target_index))


# ----------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Every tensor in ``params`` gets its ``.grad`` set (zeros when the loss does
    not depend on it).  Returns a map from leaf tensor to gradient.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                leaves[key] = parent

    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        if key in leaves:
            result[leaves[key]] = g
    for p in params:
        g = result.get(p)
        if g is None:
            g = np.zeros_like(p.values)
            result[p] = g
        p.grad = g
    return result
