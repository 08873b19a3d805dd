"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every loss in the package is assembled from the primitives below. A tensor
records the op that produced it and a closure that maps the output gradient to
its parents' gradients; :func:`backward` walks the graph in reverse
topological order and accumulates into the ``grad`` buffers of leaves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = "np.ndarray | float | int | Sequence"


class NumcoreError(Exception):
    """Base class for errors raised by the tensor core."""


class ShapeError(NumcoreError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(NumcoreError, FloatingPointError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"{op}: non-finite value produced"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class GraphError(NumcoreError, RuntimeError):
    pass


# Incremented whenever l2_normalize meets an all-zero row.
zero_norm_warnings = 0


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer of the same shape. Interior nodes keep ``grad = None``; their
    gradients live only for the duration of a :func:`backward` call.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
    ):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(op, f"shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self.grad = np.zeros_like(arr) if (requires_grad and not parents) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the functional primitives
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op, f"output shape {np.shape(data)}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant python scalar."""
    c = float(c)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log", "argument <= 0")
    return _node("log", np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reverse_grad(a: Tensor) -> Tensor:
    """Identity in the forward pass, negated gradient in the backward pass."""
    return _node("reverse_grad", a.data.copy(), (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node("dot", np.dot(ad, bd), (a, b), lambda g: (g * bd, g * ad))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node("concat", out, ts, backward_fn)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows ``a[idx]`` (repeats allowed; gradients scatter-add)."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim < 1 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise ShapeError("take_rows", a.shape, idx.shape)
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node("take_rows", a.data[idx], (a,), backward_fn)


def gather(a: Tensor, idx) -> Tensor:
    """Row-wise gather: ``out[i, j] = a[i, idx[i, j]]``."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError("gather", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError("gather", a.shape, idx.shape)
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape)
        rows = np.repeat(np.arange(shape[0]), idx.shape[1])
        np.add.at(out, (rows, idx.ravel()), g.ravel())
        return (out,)

    return _node("gather", np.take_along_axis(a.data, idx, axis=1), (a,), backward_fn)


def select(a: Tensor, col: int) -> Tensor:
    """Column ``col`` of a 2-D tensor as a vector."""
    if a.data.ndim != 2:
        raise ShapeError("select", a.shape)
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape)
        out[:, col] = g
        return (out,)

    return _node("select", a.data[:, col].copy(), (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and normalisations
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node("sum", np.sum(a.data, axis=axis), (a,), backward_fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", a.shape)
    return scale(sum(a, axis=axis), 1.0 / n)


def logsumexp(a: Tensor) -> Tensor:
    """Log-sum-exp over the last axis, stabilised by the row maximum."""
    x = a.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("logsumexp", a.shape)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    soft = e / s
    return _node("logsumexp", out, (a,), lambda g: (np.expand_dims(g, -1) * soft,))


def softmax(a: Tensor) -> Tensor:
    x = a.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax", a.shape)
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    p = e / np.sum(e, axis=-1, keepdims=True)

    def backward_fn(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _node("softmax", p, (a,), backward_fn)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("log_softmax", a.shape)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward_fn(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _node("log_softmax", out, (a,), backward_fn)


def nll(log_probs: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood ``-log_probs[i, targets[i]]``."""
    t = np.asarray(targets, dtype=np.intp)
    lp = log_probs.data
    if lp.ndim != 2 or t.shape != (lp.shape[0],):
        raise ShapeError("nll", log_probs.shape, t.shape)
    if t.size and (t.min() < 0 or t.max() >= lp.shape[1]):
        raise ShapeError("nll", log_probs.shape, t.shape)
    rows = np.arange(lp.shape[0])
    shape = lp.shape

    def backward_fn(g):
        out = np.zeros(shape)
        out[rows, t] = -g
        return (out,)

    return _node("nll", -lp[rows, t], (log_probs,), backward_fn)


def l2_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    """Scale each row (or a lone vector) to unit Euclidean norm.

    An all-zero row maps to zero with zero gradient and bumps
    ``zero_norm_warnings`` instead of producing NaN.
    """
    global zero_norm_warnings
    x = a.data
    if x.ndim not in (1, 2):
        raise ShapeError("l2_normalize", a.shape)
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    zero = norm <= eps
    if np.any(zero):
        zero_norm_warnings += int(np.count_nonzero(zero))
        logger.warning("l2_normalize: %d zero-norm row(s)", int(np.count_nonzero(zero)))
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x / safe)

    def backward_fn(g):
        proj = g - y * np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(zero, 0.0, proj / safe),)

    return _node("l2_normalize", y, (a,), backward_fn)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered view of everything a root tensor depends on."""

    nodes: list[Tensor]
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = finished
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            node, i = stack.pop()
            key = id(node)
            if i == 0:
                if state.get(key) == 2:
                    continue
                if state.get(key) == 1:
                    raise GraphError(f"cycle through {node.op}")
                state[key] = 1
            parents = [p for p in node._parents if p.requires_grad]
            if i < len(parents):
                stack.append((node, i + 1))
                child = parents[i]
                if state.get(id(child)) == 1:
                    raise GraphError(f"cycle through {child.op}")
                if state.get(id(child)) != 2:
                    stack.append((child, 0))
            else:
                state[key] = 2
                order.append(node)
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        return cls(order, leaves)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Calling twice without zeroing the leaves adds the gradients together.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{node.op}: gradient shape {pg.shape} != {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in graph.leaves:
        if not np.all(np.isfinite(leaf.grad)):
            raise NonFiniteError("backward", f"leaf gradient of shape {leaf.shape}")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


class GradcheckError(NumcoreError):
    def __init__(self, index: int, which: str):
        self.index = index
        super().__init__(f"non-finite {which} gradient at coordinate {index}")


def gradcheck(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps a leaf tensor to a scalar tensor. The error at each coordinate
    is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not (1e-8 < step < 1e-2):
        raise ValueError(f"step {step} outside (1e-8, 1e-2)")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise NonFiniteError("gradcheck", "point")
    leaf = Tensor(x0, requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad.ravel()

    worst = 0.0
    flat = x0.ravel()
    for i in range(flat.size):
        if not np.isfinite(analytic[i]):
            raise GradcheckError(i, "analytic")
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = f(Tensor(plus.reshape(x0.shape))).item()
        fm = f(Tensor(minus.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2.0 * step)
        if not np.isfinite(numeric):
            raise GradcheckError(i, "numeric")
        a = analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class SgdMomentumState:
    """Velocity buffers and per-parameter learning rates for classic momentum."""

    momentum: float
    lrs: list[float]
    velocity: list[np.ndarray]

    @classmethod
    def for_groups(cls, groups: Sequence[tuple[Sequence[Tensor], float]], momentum: float = 0.9):
        lrs, vel = [], []
        for params, lr in groups:
            for p in params:
                lrs.append(float(lr))
                vel.append(np.zeros_like(p.data))
        state = cls(momentum, lrs, vel)
        state.validate()
        return state

    def validate(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum {self.momentum} outside [0, 1)")
        if any(lr <= 0 for lr in self.lrs):
            raise ValueError("learning rates must be positive")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SgdMomentumState) -> Sequence[Tensor]:
    """In-place update ``v <- mu*v + g; p <- p - lr*v``.

    All gradients are checked before any parameter is touched, so a
    non-finite gradient leaves the model unchanged.
    """
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ValueError("params, grads and optimiser state disagree in length")
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if p.shape != np.shape(g) or v.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, np.shape(g), v.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("sgd_step", f"gradient of parameter {i}")
    mu = state.momentum
    for p, g, v, lr in zip(params, grads, state.velocity, state.lrs):
        v *= mu
        v += g
        p.data -= lr * v
    return params
