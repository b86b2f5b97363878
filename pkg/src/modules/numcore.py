"""Dense float64 tensors with reverse-mode automatic differentiation.

Each differentiable op computes its forward result with numpy and records a
backward rule on the output tensor. `Graph.from_loss` orders the recorded ops
topologically and `backward` walks that order in reverse, accumulating
gradients additively into every tensor that requires them.

There is no global tape: a graph is reachable only from its output tensor, so
independent forwards can run on different threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..utils.exceptions import ConfigError, ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense row-major float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Return a tensor sharing this data but carrying no graph and no gradient."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(Graph.from_loss(self), self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite values produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to a trailing-suffix shape."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; `b` may be a trailing suffix of `a` (bias rows)."""
    _check_suffix(a, b, "add")

    def _bw(g):
        return g, _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; `b` may be a trailing suffix of `a` (per-channel gain)."""
    _check_suffix(a, b, "mul")

    def _bw(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", _bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def add_constant(a: Tensor, const: np.ndarray) -> Tensor:
    """a + const where const carries no gradient (attention masks, position tables)."""
    const = np.asarray(const, dtype=DTYPE)
    out = a.data + const
    if out.shape != a.shape:
        raise DimensionError(f"add_constant: constant {const.shape} widens {a.shape}")
    return _result(out, (a,), "add_constant", lambda g: (g,))


def mul_constant(a: Tensor, const: np.ndarray) -> Tensor:
    """a * const where const carries no gradient (validity masks, targets)."""
    const = np.asarray(const, dtype=DTYPE)
    out = a.data * const
    if out.shape != a.shape:
        raise DimensionError(f"mul_constant: constant {const.shape} widens {a.shape}")
    return _result(out, (a,), "mul_constant", lambda g: (g * const,))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def _bw(g):
        return (g * positive,)

    return _result(np.where(positive, x.data, 0.0), (x,), "relu", _bw)


def clamped_log(p: Tensor, floor: float = 1e-12) -> tuple[Tensor, int]:
    """log(max(p, floor)); returns the log tensor and how many entries were clamped."""
    clamped = p.data < floor
    safe = np.where(clamped, floor, p.data)

    def _bw(g):
        return (np.where(clamped, 0.0, g / safe),)

    return _result(np.log(safe), (p,), "clamped_log", _bw), int(clamped.sum())


# ---------------------------------------------------------------------------
# Shape
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: {original} -> {tuple(shape)}: {e}") from e
    return _result(out, (x,), "reshape", lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: [M×K]·[K×N]; [...×M×K]·[K×N] (shared weight across leading
    axes); [...×M×K]·[...×K×N] with identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ in {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def _bw(g):
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return grad_a, grad_b

        return _result(a.data @ b.data, (a, b), "matmul", _bw)

    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading axes differ in {a.shape} and {b.shape}")

    def _bw_batched(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(np.matmul(a.data, b.data), (a, b), "matmul", _bw_batched)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty last dimension, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), "softmax_rows", _bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax_rows needs a non-empty last dimension, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    z = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _bw(g):
        return (g - np.exp(z) * g.sum(axis=-1, keepdims=True),)

    return _result(z, (x,), "log_softmax_rows", _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise DimensionError("layer_norm needs D >= 1")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def _bw(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _reduce_to(g * xhat, (d,)), _reduce_to(g, (d,))

    return _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", _bw)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity at inference or when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Sequence ops
# ---------------------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise DimensionError("embedding weight must be a matrix")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"embedding ids must lie in [0, {weight.shape[0]})")

    def _bw(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return _result(weight.data[ids], (weight,), "embedding", _bw)


def unfold_time(x: Tensor, kernel: int) -> Tensor:
    """[B×M×C] -> [B×M×(kernel·C)]: each frame concatenated with its zero-padded neighbours."""
    if x.ndim != 3:
        raise DimensionError(f"unfold_time expects [B×M×C], got {x.shape}")
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError("unfold_time kernel must be odd and positive")
    b, m, c = x.shape
    half = kernel // 2
    padded = np.zeros((b, m + 2 * half, c), dtype=DTYPE)
    padded[:, half:half + m] = x.data
    out = np.concatenate([padded[:, j:j + m] for j in range(kernel)], axis=-1)

    def _bw(g):
        grad = np.zeros_like(padded)
        for j in range(kernel):
            grad[:, j:j + m] += g[..., j * c:(j + 1) * c]
        return (grad[:, half:half + m],)

    return _result(out, (x,), "unfold_time", _bw)


def max_pool_time(x: Tensor) -> Tensor:
    """Stride-2, width-2 max pooling over the time axis of [B×M×C]; output length ceil(M/2)."""
    if x.ndim != 3:
        raise DimensionError(f"max_pool_time expects [B×M×C], got {x.shape}")
    b, m, c = x.shape
    out_len = (m + 1) // 2
    padded = np.full((b, 2 * out_len, c), -np.inf, dtype=DTYPE)
    padded[:, :m] = x.data
    pairs = padded.reshape(b, out_len, 2, c)
    pick = pairs.argmax(axis=2)
    out = np.take_along_axis(pairs, pick[:, :, None, :], axis=2)[:, :, 0, :]

    def _bw(g):
        grad = np.zeros_like(pairs)
        np.put_along_axis(grad, pick[:, :, None, :], g[:, :, None, :], axis=2)
        return (grad.reshape(b, 2 * out_len, c)[:, :m],)

    return _result(out, (x,), "max_pool_time", _bw)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), "sum_all", lambda g: (np.broadcast_to(g, shape).copy(),))


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    """Left-to-right sum of scalar tensors."""
    terms = list(terms)
    if not terms:
        raise ContractError("add_scalars needs at least one term")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]


class Graph:
    """Topologically ordered record of the ops that produced a loss."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order: list[Node] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(Node(t.op, t, t._parents))
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for parent in t._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def backward(graph: Graph, loss: Tensor) -> None:
    """Write d(loss)/d(t) into `t.grad` for every tensor in the graph that requires it.

    Gradients accumulate; callers zero parameter grads between steps. Intermediate
    tensors are fresh per forward, so a graph is meant to be walked once.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    _accumulate(loss, np.ones((), dtype=DTYPE))
    for node in reversed(graph.nodes):
        t = node.output
        if t._backward is None or t.grad is None:
            continue
        grads = t._backward(t.grad)
        for parent, g in zip(node.inputs, grads):
            if g is None or not parent.requires_grad:
                continue
            _check_finite(g, f"backward of {node.op}")
            _accumulate(parent, g)
