"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensor-valued, tape-based: every operation that sees a Tensor argument
records a node; calling the same functions with plain ndarrays executes the
numpy path with zero overhead, so forward-only code (rollouts) and
gradient code share one implementation.

Only the operations this project needs are provided; all arrays are
float64.
"""

from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "backward",
    "is_tensor",
    "value_of",
    "matmul",
    "linear",
    "silu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "square",
    "clip",
    "minimum",
    "maximum",
    "total",
    "mean_all",
    "sum_axis",
    "concat_cols",
    "gather_rows",
    "scatter_rows",
    "col_slice",
    "col_at",
    "segment_sum",
    "segment_mean_subtract",
    "expand_scalar_per_segment",
    "edge_sqdist",
    "edge_message_silu",
    "coord_step",
]


class Tensor:
    """A node in the reverse-mode tape."""

    __slots__ = ("value", "grad", "_parents", "_bwd")

    # make numpy defer to the reflected operators instead of coercing
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, value, parents=(), bwd=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only **2 is supported")


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x):
    return x.value if isinstance(x, Tensor) else x


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable Tensor."""
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError("backward requires a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._bwd is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bwd(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
            else:
                parent.grad += g


# -- primitive ops ----------------------------------------------------------


def _add(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a + b
    av, bv = value_of(a), value_of(b)
    out = av + bv
    parents, bwds = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        bwds.append(lambda g: _unbroadcast(g, av.shape))
    if isinstance(b, Tensor):
        parents.append(b)
        bwds.append(lambda g: _unbroadcast(g, np.shape(bv)))
    return Tensor(out, tuple(parents), lambda g: tuple(f(g) for f in bwds))


def _neg(a):
    if not isinstance(a, Tensor):
        return -a
    return Tensor(-a.value, (a,), lambda g: (-g,))


def _mul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a * b
    av, bv = value_of(a), value_of(b)
    out = av * bv
    parents, bwds = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        bwds.append(lambda g: _unbroadcast(g * bv, av.shape))
    if isinstance(b, Tensor):
        parents.append(b)
        bwds.append(lambda g: _unbroadcast(g * av, np.shape(bv)))
    return Tensor(out, tuple(parents), lambda g: tuple(f(g) for f in bwds))


def _div(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a / b
    av, bv = value_of(a), value_of(b)
    out = av / bv
    parents, bwds = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        bwds.append(lambda g: _unbroadcast(g / bv, av.shape))
    if isinstance(b, Tensor):
        parents.append(b)
        bwds.append(lambda g: _unbroadcast(-g * av / (bv * bv), np.shape(bv)))
    return Tensor(out, tuple(parents), lambda g: tuple(f(g) for f in bwds))


def matmul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a @ b
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    parents, bwds = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        bwds.append(lambda g: g @ bv.T)
    if isinstance(b, Tensor):
        parents.append(b)
        bwds.append(lambda g: av.T @ g)
    return Tensor(out, tuple(parents), lambda g: tuple(f(g) for f in bwds))


def linear(x, w, b):
    """x @ w + b without the intermediate temporary."""
    if not any(isinstance(v, Tensor) for v in (x, w, b)):
        out = x @ w
        out += b
        return out
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = xv @ wv
    out += bv
    inputs = (x, w, b)
    parents = tuple(v for v in inputs if isinstance(v, Tensor))

    def bwd(g):
        grads = (
            g @ wv.T if isinstance(x, Tensor) else None,
            xv.T @ g if isinstance(w, Tensor) else None,
            g.sum(axis=0) if isinstance(b, Tensor) else None,
        )
        return tuple(gr for gr, v in zip(grads, inputs) if isinstance(v, Tensor))

    return Tensor(out, parents, bwd)


def silu(x):
    if not isinstance(x, Tensor):
        return kernels.silu_fwd(x)[0]
    y, sig = kernels.silu_fwd(x.value)
    return Tensor(y, (x,), lambda g: (kernels.silu_bwd(g, x.value, sig),))


def sigmoid(x):
    if not isinstance(x, Tensor):
        return 1.0 / (1.0 + np.exp(-x))
    s = 1.0 / (1.0 + np.exp(-x.value))
    return Tensor(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    y = np.exp(x.value)
    return Tensor(y, (x,), lambda g: (g * y,))


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    return Tensor(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x):
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    y = np.sqrt(x.value)
    return Tensor(y, (x,), lambda g: (g / (2.0 * y),))


def square(x):
    if not isinstance(x, Tensor):
        return x * x
    return Tensor(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def clip(x, lo: float, hi: float):
    """Clamp with zero gradient outside [lo, hi]."""
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    mask = (x.value >= lo) & (x.value <= hi)
    return Tensor(np.clip(x.value, lo, hi), (x,), lambda g: (g * mask,))


def _select(a, b, take_a: np.ndarray):
    av, bv = value_of(a), value_of(b)
    out = np.where(take_a, av, bv)
    parents, bwds = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        bwds.append(lambda g: _unbroadcast(g * take_a, np.shape(av)))
    if isinstance(b, Tensor):
        parents.append(b)
        bwds.append(lambda g: _unbroadcast(g * ~take_a, np.shape(bv)))
    return Tensor(out, tuple(parents), lambda g: tuple(f(g) for f in bwds))


def minimum(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.minimum(a, b)
    return _select(a, b, np.asarray(value_of(a) <= value_of(b)))


def maximum(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.maximum(a, b)
    return _select(a, b, np.asarray(value_of(a) >= value_of(b)))


def total(x):
    """Sum of all elements (scalar)."""
    if not isinstance(x, Tensor):
        return np.sum(x)
    shape = x.value.shape
    return Tensor(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    n = value_of(x).size
    return total(x) * (1.0 / n)


def sum_axis(x, axis: int, keepdims: bool = False):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    val = np.sum(x.value, axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.value.shape).copy(),)

    return Tensor(val, (x,), bwd)


def concat_cols(parts):
    """Concatenate (N, ·) blocks along axis 1."""
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate([np.atleast_2d(p.T).T if p.ndim == 1 else p for p in parts], axis=1)
    vals = [value_of(p) for p in parts]
    vals2 = [v[:, None] if v.ndim == 1 else v for v in vals]
    out = np.concatenate(vals2, axis=1)
    widths = [v.shape[1] for v in vals2]
    offsets = np.cumsum([0] + widths)
    parents, slots = [], []
    for i, p in enumerate(parts):
        if isinstance(p, Tensor):
            parents.append(p)
            slots.append(i)

    def bwd(g):
        grads = []
        for i in slots:
            piece = g[:, offsets[i] : offsets[i + 1]]
            if vals[i].ndim == 1:
                piece = piece[:, 0]
            grads.append(np.ascontiguousarray(piece))
        return tuple(grads)

    return Tensor(out, tuple(parents), bwd)


def gather_rows(x, idx: np.ndarray):
    if not isinstance(x, Tensor):
        return kernels.gather_rows(x, idx)
    n = x.value.shape[0]
    return Tensor(
        kernels.gather_rows(x.value, idx),
        (x,),
        lambda g: (kernels.scatter_add_rows(np.ascontiguousarray(g), idx, n),),
    )


def scatter_rows(x, idx: np.ndarray, n_rows: int):
    """Place rows of x at unique indices of a zero array of n_rows rows."""
    if not isinstance(x, Tensor):
        out = np.zeros((n_rows,) + x.shape[1:], dtype=np.float64)
        out[idx] = x
        return out
    out = np.zeros((n_rows,) + x.value.shape[1:], dtype=np.float64)
    out[idx] = x.value
    return Tensor(out, (x,), lambda g: (kernels.gather_rows(np.ascontiguousarray(g), idx),))


def col_slice(x, a: int, b: int):
    if not isinstance(x, Tensor):
        return x[:, a:b]

    def bwd(g):
        out = np.zeros_like(x.value)
        out[:, a:b] = g
        return (out,)

    return Tensor(x.value[:, a:b].copy(), (x,), bwd)


def col_at(x, i: int):
    """Column i as a 1-d vector."""
    if not isinstance(x, Tensor):
        return x[:, i]

    def bwd(g):
        out = np.zeros_like(x.value)
        out[:, i] = g
        return (out,)

    return Tensor(x.value[:, i].copy(), (x,), bwd)


def segment_sum(x, starts: np.ndarray):
    """Per-segment row sums; segments are contiguous and non-empty."""
    if not isinstance(x, Tensor):
        return kernels.segment_sum(x, starts)
    return Tensor(
        kernels.segment_sum(x.value, starts),
        (x,),
        lambda g: (kernels.segment_sum_bwd(np.ascontiguousarray(g), starts),),
    )


def segment_mean_subtract(x, starts: np.ndarray):
    """Remove the per-segment column mean (CoM projection per complex).

    Symmetric idempotent linear map, so the backward pass applies the same
    projection to the gradient.
    """
    counts = np.diff(starts).astype(np.float64)

    def project(v):
        means = kernels.segment_sum(v, starts) / counts[:, None]
        return v - kernels.segment_sum_bwd(means, starts)

    if not isinstance(x, Tensor):
        return project(x)
    return Tensor(project(x.value), (x,), lambda g: (project(np.ascontiguousarray(g)),))


def expand_scalar_per_segment(x, starts: np.ndarray):
    """Broadcast one scalar per segment to every row of that segment."""
    if not isinstance(x, Tensor):
        return np.repeat(x, np.diff(starts), axis=0)
    reps = np.diff(starts)
    return Tensor(
        np.repeat(x.value, reps, axis=0),
        (x,),
        lambda g: (kernels.segment_sum(np.ascontiguousarray(g), starts),),
    )


def edge_sqdist(x, src: np.ndarray, dst: np.ndarray):
    """Squared distance per edge: ||x[dst] - x[src]||^2."""
    if not isinstance(x, Tensor):
        return kernels.edge_sqdist(x, src, dst)
    return Tensor(
        kernels.edge_sqdist(x.value, src, dst),
        (x,),
        lambda g: (kernels.edge_sqdist_bwd(np.ascontiguousarray(g), x.value, src, dst),),
    )


def edge_message_silu(hd, hs, d2, src: np.ndarray, dst: np.ndarray, wd2):
    """silu(hd[dst] + hs[src] + outer(d2, wd2)), fused; backward recomputes."""
    if not any(isinstance(v, Tensor) for v in (hd, hs, d2, wd2)):
        return kernels.edge_message_silu(hd, hs, d2, src, dst, wd2)
    hdv, hsv, d2v, wv = (value_of(v) for v in (hd, hs, d2, wd2))
    m = kernels.edge_message_silu(hdv, hsv, d2v, src, dst, wv)
    inputs = (hd, hs, d2, wd2)
    parents = tuple(v for v in inputs if isinstance(v, Tensor))

    def bwd(g):
        grads = kernels.edge_message_silu_bwd(
            np.ascontiguousarray(g), hdv, hsv, d2v, src, dst, wv
        )
        return tuple(gr for gr, v in zip(grads, inputs) if isinstance(v, Tensor))

    return Tensor(m, parents, bwd)


def coord_step(x, s, src: np.ndarray, dst: np.ndarray, seg_starts: np.ndarray):
    """Per ligand node: sum of s_e * (x_dst - x_src)/(dist + 1) over in-edges."""
    if not (isinstance(x, Tensor) or isinstance(s, Tensor)):
        return kernels.coord_step(x, s, src, dst, seg_starts)
    xv, sv = value_of(x), value_of(s)
    out = kernels.coord_step(xv, sv, src, dst, seg_starts)
    inputs = (x, s)
    parents = tuple(v for v in inputs if isinstance(v, Tensor))

    def bwd(g):
        gx, gs = kernels.coord_step_bwd(np.ascontiguousarray(g), xv, sv, src, dst, seg_starts)
        grads = (gx, gs)
        return tuple(gr for gr, v in zip(grads, inputs) if isinstance(v, Tensor))

    return Tensor(out, parents, bwd)
