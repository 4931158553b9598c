"""Dense arrays with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` holding a
closure that maps the output gradient to one gradient per parent.  Graphs are
built only through tensors that require gradients, so inference on frozen
weights carries no bookkeeping.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateRowError, DimensionError, NumericError

RMS_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A float array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap ``data`` as the output of an operation over ``parents``."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- array protocol -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, self._lift(1.0 / other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


# -- graph ----------------------------------------------------------------------


class ComputeGraph:
    """Topologically ordered nodes reachable from a root that require grad."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> ComputeGraph:
    """Populate ``.grad`` on every leaf reachable from ``loss`` that requires it.

    Gradients accumulate into existing ``.grad`` buffers, which is what
    micro-batch accumulation relies on.  Returns the traversed graph.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph.trace(loss)
    if not graph.nodes:
        return graph
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return graph


# -- elementwise ----------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return Tensor.from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def silu(x: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * sig
    return Tensor.from_op(out, (x,), lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),), "silu")


# -- shape ops --------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return Tensor.from_op(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def _back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.array(out), (x,), _back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor.from_op(out, tuple(tensors), _back, "concat")


def astype(x: Tensor, dtype) -> Tensor:
    """Precision change; gradients flow back in the source precision."""
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    src = x.dtype
    return Tensor.from_op(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "astype")


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    out = np.roll(x.data, shift, axis=axis)
    return Tensor.from_op(out, (x,), lambda g: (np.roll(g, -shift, axis=axis),), "roll")


def pad_axis(x: Tensor, before: int, after: int, axis: int) -> Tensor:
    """Zero-pad along one axis."""
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    out = np.pad(x.data, widths)
    size = x.shape[axis]
    return Tensor.from_op(
        out, (x,), lambda g: (np.take(g, np.arange(before, before + size), axis=axis),), "pad"
    )


# -- reductions ------------------------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def _back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), _back, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis) * (1.0 / count)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor.from_op(out, (a, b), _back, "matmul")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    out = weight.data[ids]

    def _back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor.from_op(out, (weight,), _back, "embedding")


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """For a 2-D ``x``, select ``x[i, idx[i]]`` for every row."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def _back(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return (full,)

    return Tensor.from_op(out, (x,), _back, "take")


# -- normalisation and softmax --------------------------------------------------


def _check_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask)
    try:
        np.broadcast_shapes(mask.shape, shape)
    except ValueError:
        raise DimensionError(f"mask shape {mask.shape} does not match {shape}") from None
    if not np.all((mask == 0) | np.isneginf(mask)):
        raise ContractError("mask entries must be 0 or -inf")
    return mask


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, with an optional additive 0/-inf mask."""
    z = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else mask
        z = z + _check_mask(m, x.shape).astype(z.dtype)
    row_max = z.max(axis=-1, keepdims=True)
    if np.isneginf(row_max).any():
        raise DegenerateRowError("softmax row is fully masked")
    e = np.exp(z - row_max)
    p = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(p, (x,), _back, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return Tensor.from_op(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def rms_norm(x: Tensor, weight: Tensor, eps: float = RMS_EPS) -> Tensor:
    """``weight * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise DimensionError(f"norm weight {weight.shape} does not match input {x.shape}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * weight.data

    def _back(g):
        gx = gw = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gw

    return Tensor.from_op(out, (x, weight), _back, "rms_norm")


# -- gradient checking --------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` is evaluated in 64-bit on a copy of ``x``; coordinates whose
    analytic and numeric derivatives are both tiny are floored at 1e-8.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("f returned a non-finite value")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    def _eval(arr: np.ndarray) -> float:
        val = float(np.asarray(f(Tensor(arr)).data, dtype=np.float64).reshape(-1)[0])
        if not np.isfinite(val):
            raise NumericError("f returned a non-finite value")
        return val

    numeric = np.empty_like(base)
    for idx in np.ndindex(base.shape):
        bumped = base.copy()
        bumped[idx] = base[idx] + step
        hi = _eval(bumped)
        bumped[idx] = base[idx] - step
        lo = _eval(bumped)
        numeric[idx] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def parameters_with_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.grad is not None]
