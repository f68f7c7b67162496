"""Eager reverse-mode automatic differentiation over float64 numpy arrays.

Every op computes its value immediately and records a closure that maps the
upstream gradient to gradients for its parents. :func:`backward` walks the
recorded graph in reverse topological order.

Only nodes with ``requires_grad`` set are recorded; constants never carry
parents and their ``grad`` is never touched.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from fedal import kernels
from fedal.errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "forward_op",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "softmax",
    "layernorm",
    "gelu",
    "mean",
    "sum_",
    "slice_",
    "concat",
    "mse",
    "transpose",
    "reshape",
    "embedding",
    "causal_mask",
    "moving_average",
]


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(values, True, op, tuple(parents), backward)
    return Tensor(values, False, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.values + b.values, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.values - b.values, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a, b)

    def back(g):
        ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.values * b.values, "mul", (a, b), back)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _node(a.values * c, "scale", (a,), lambda g: (g * c,))


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    return _node(kernels.gelu_forward(a.values), "gelu", (a,),
                 lambda g: (kernels.gelu_backward(g, a.values),))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.values @ b.values
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.values.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, "matmul", (a, b), back)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.values, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def slice_(a, key) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.values[key]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {a.shape}") from None

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), "slice", (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}"
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, "concat", ts, back)


def embedding(table, indices) -> Tensor:
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2:
        raise DimensionError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding-lookup: index out of range for table {table.shape}, indices {idx.shape}"
        )

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(table.values[idx], "embedding-lookup", (table,), back)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(out, "mean-over-axis", (a,), back)


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes differ {pred.shape} and {target.shape}")
    diff = pred.values - target.values
    n = diff.size

    def back(g):
        gp = 2.0 * diff * (g / n)
        return gp, -gp

    return _node(np.mean(diff * diff), "mse", (pred, target), back)


# ---------------------------------------------------------------------------
# normalisation, attention


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    y = kernels.softmax_forward(_rows(a.values)).reshape(a.shape)

    def back(g):
        return (kernels.softmax_backward(_rows(g), _rows(y)).reshape(a.shape),)

    return _node(y, "softmax", (a,), back)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an affine map."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}"
        )
    y, xhat, rstd = kernels.layernorm_forward(_rows(x.values), gamma.values, beta.values, eps)

    def back(g):
        dx, dgamma, dbeta = kernels.layernorm_backward(_rows(g), xhat, rstd, gamma.values)
        return dx.reshape(x.shape), dgamma, dbeta

    return _node(y.reshape(x.shape), "layernorm", (x, gamma, beta), back)


def causal_mask(scores) -> Tensor:
    """Set entries above the diagonal of the trailing [T, T] block to -inf."""
    scores = _as_tensor(scores)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"causal-attention-score-mask: needs square trailing block, got {scores.shape}")
    t = scores.shape[-1]
    upper = np.triu(np.ones((t, t), dtype=bool), k=1)
    out = np.where(upper, -np.inf, scores.values)
    return _node(out, "causal-attention-score-mask", (scores,),
                 lambda g: (np.where(upper, 0.0, g),))


def moving_average(a, tau: int) -> Tensor:
    """Centered width-``tau`` moving average over axis -2, edge-replicated."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"moving-average: needs [..., T, D], got {a.shape}")
    t, d = a.shape[-2:]
    if not 1 <= tau <= t:
        raise ContractError(f"moving-average: tau={tau} outside [1, {t}]")
    flat = np.ascontiguousarray(a.values.reshape(-1, t, d))
    out = kernels.moving_average(flat, int(tau)).reshape(a.shape)

    def back(g):
        gf = np.ascontiguousarray(g.reshape(-1, t, d))
        return (kernels.moving_average_backward(gf, int(tau)).reshape(a.shape),)

    return _node(out, "moving-average", (a,), back)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "softmax": softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "mean-over-axis": mean,
    "sum": sum_,
    "slice": slice_,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "mse": mse,
    "transpose": transpose,
    "reshape": reshape,
    "embedding-lookup": embedding,
    "causal-attention-score-mask": causal_mask,
    "moving-average": moving_average,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply the op named ``kind`` to ``inputs`` (dispatch by name)."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every requires_grad ancestor."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    adj: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = adj.get(id(p))
            adj[id(p)] = gp if prev is None else prev + gp
