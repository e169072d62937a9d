"""Dense float64 tensors with reverse-mode automatic differentiation.

Every trainable part of the registration network is built from the ops in
this module. Shapes must match exactly; the only implicit broadcast is a
scalar scale. Row-bias addition is spelled out with :func:`linear` or
:func:`add_row`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._spent = False

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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    # a NaN or inf anywhere poisons the sum
    if not np.isfinite(out.sum()):
        raise FloatingPointError(f"non-finite value produced by {op}")


def make_node(out: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str, check: bool = True) -> Tensor:
    """Wrap a forward result as a graph node.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    Ops defined outside this module use this to join the graph. Ops that only
    select, move or clamp finite entries pass ``check=False``; leaves are
    checked on construction, so finiteness still holds for every node.
    """
    if check:
        _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._op = op
    t._spent = False
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_node(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def scale_by(a, s) -> Tensor:
    """Multiply every entry of ``a`` by the scalar tensor ``s``."""
    a, s = as_tensor(a), as_tensor(s)
    if s.data.size != 1:
        raise ShapeError(f"scale_by: expected scalar factor, got {s.shape}")
    ad, sd = a.data, s.data.reshape(())
    return make_node(ad * sd, (a, s), lambda g: (g * sd, np.reshape((g * ad).sum(), s.shape)), "scale_by")


def scale_rows(a, v) -> Tensor:
    """Multiply row i of ``a`` (m×c) by v[i]."""
    a, v = as_tensor(a), as_tensor(v)
    if a.ndim != 2 or v.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: shape mismatch {a.shape} vs {v.shape}")
    ad, vd = a.data, v.data
    return make_node(ad * vd[:, None], (a, v), lambda g: (g * vd[:, None], (g * ad).sum(axis=1)), "scale_rows")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return make_node(out, (a,), lambda g: (g * (out > 0),), "relu", check=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_node(out, (a,), lambda g: (g * sig,), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise FloatingPointError("log of non-positive value")
    return make_node(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt of negative value")
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = (np.outer(g, bd) if bd.ndim == 1 else g @ bd.T) if need_a else None
        return ga, (ad.T @ g if need_b else None)

    return make_node(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b, relu: bool = False) -> Tensor:
    """x @ w + b with b added to every row (x: m×i, w: i×o, b: o).

    ``relu=True`` fuses a rectifier onto the output, saving one graph node.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data
    if relu:
        np.maximum(out, 0.0, out=out)

    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g):
        if relu:
            g = g * (out > 0)
        return (g @ wd.T if need_x else None), (xd.T @ g if need_w else None), g.sum(axis=0)

    return make_node(out, (x, w, b), bw, "linear")


def linear_segments(x, w, b, counts, relu: bool = False) -> Tensor:
    """x @ w with row k of b added to the k-th run of counts[k] consecutive rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    counts = np.asarray(counts, dtype=np.intp)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear_segments: shape mismatch {x.shape} vs {w.shape}")
    if b.shape != (len(counts), w.shape[1]) or counts.sum() != x.shape[0] or (counts < 0).any():
        raise ShapeError(f"linear_segments: bias {b.shape} / counts {counts.tolist()} vs rows {x.shape[0]}")
    xd, wd = x.data, w.data
    bounds = np.concatenate([[0], np.cumsum(counts)])
    out = xd @ wd
    for k in range(len(counts)):
        out[bounds[k]:bounds[k + 1]] += b.data[k]
    if relu:
        np.maximum(out, 0.0, out=out)

    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g):
        if relu:
            g = g * (out > 0)
        gb = np.stack([g[bounds[k]:bounds[k + 1]].sum(axis=0) for k in range(len(counts))])
        return (g @ wd.T if need_x else None), (xd.T @ g if need_w else None), gb

    return make_node(out, (x, w, b), bw, "linear_segments")


def add_row(x, v) -> Tensor:
    """Add vector v (length c) to every row of x (m×c)."""
    x, v = as_tensor(x), as_tensor(v)
    if x.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"add_row: shape mismatch {x.shape} vs {v.shape}")
    return make_node(x.data + v.data, (x, v), lambda g: (g, g.sum(axis=0)), "add_row")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    return make_node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose", check=False)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from exc
    return make_node(out, (a,), lambda g: (g.reshape(src),), "reshape", check=False)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return make_node(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat", check=False)


def repeat_rows(v, n: int) -> Tensor:
    """Stack n copies of vector v into an n×len(v) matrix."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"repeat_rows: expected 1-d, got {v.shape}")
    out = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return make_node(out, (v,), lambda g: (g.sum(axis=0),), "repeat_rows", check=False)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.array(out)
    else:
        out = out.copy()

    basic = isinstance(index, slice) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def bw(g):
        full = np.zeros(src)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(out, (a,), bw, "getitem", check=False)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Rows a[idx]; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(a.data[idx], (a,), bw, "gather_rows", check=False)


# ---------------------------------------------------------------- reductions

def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(out, (a,), bw, "sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), bw, "softmax")


def max_reduce(a, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; returns (values, argmax). Ties go to the lowest index."""
    a = as_tensor(a)
    x = a.data
    ax = axis % x.ndim
    arg = np.argmax(x, axis=ax)
    vals = np.take_along_axis(x, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return make_node(vals, (a,), bw, "max_reduce", check=False), arg


def segment_max(a, labels: np.ndarray, n_segments: int) -> tuple[Tensor, np.ndarray]:
    """Row-group max: out[k] = elementwise max over rows i with labels[i] == k.

    Empty segments give zero rows. Returns (values, occupied mask). Ties route
    the gradient to the lowest row index, as in :func:`max_reduce`.
    """
    a = as_tensor(a)
    x = a.data
    labels = np.asarray(labels, dtype=np.intp)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError(f"segment_max: shape mismatch {x.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_segments):
        raise ShapeError(f"segment_max: labels outside [0, {n_segments})")
    rows, cols = x.shape
    # stable sort keeps rows of a segment in index order, so the first hit is the lowest index
    if rows and np.all(labels[1:] >= labels[:-1]):
        order, xs, ls = np.arange(rows), x, labels
    else:
        order = np.argsort(labels, kind="stable")
        xs, ls = x[order], labels[order]
    present, starts = np.unique(ls, return_index=True)
    if rows:
        seg_max = np.maximum.reduceat(xs, starts, axis=0)
        hit = np.where(xs == np.repeat(seg_max, np.diff(np.append(starts, rows)), axis=0),
                       np.arange(rows, dtype=np.int32)[:, None], np.int32(rows))
        first = np.minimum.reduceat(hit, starts, axis=0)
    else:
        seg_max, first = np.zeros((0, cols)), np.zeros((0, cols), dtype=np.intp)
    src_row = order[first]
    out = np.zeros((n_segments, cols))
    out[present] = seg_max
    occupied = np.zeros(n_segments, dtype=bool)
    occupied[present] = True
    col_idx = np.broadcast_to(np.arange(cols), src_row.shape)

    def bw(g):
        full = np.zeros((rows, cols))
        # each (row, column) is the argmax of at most one segment, so plain assignment suffices
        full[src_row, col_idx] = g[present]
        return (full,)

    return make_node(out, (a,), bw, "segment_max", check=False), occupied


def repeat_segments(a, counts) -> Tensor:
    """Repeat row k of ``a`` counts[k] times, stacking the copies in order."""
    a = as_tensor(a)
    counts = np.asarray(counts, dtype=np.intp)
    if a.ndim != 2 or counts.shape != (a.shape[0],) or (counts < 0).any():
        raise ShapeError(f"repeat_segments: shape mismatch {a.shape} vs counts {counts.shape}")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    src = a.shape
    nonempty = counts > 0

    def bw(g):
        full = np.zeros(src)
        if g.shape[0]:
            full[nonempty] = np.add.reduceat(g, starts[nonempty], axis=0)
        return (full,)

    return make_node(np.repeat(a.data, counts, axis=0), (a,), bw, "repeat_segments", check=False)


# ---------------------------------------------------------------- backward

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
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._spent:
        raise GraphError("backward called twice on the same graph; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._spent = True


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` must map the tensor to a scalar. Numeric derivatives use central
    differences on a copy of ``x``.
    """
    x = as_tensor(x)
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1 or out.ndim > 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    base = x.data.copy()
    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = f(Tensor(base.copy())).item()
        flat[i] = orig - epsilon
        lo = f(Tensor(base.copy())).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * epsilon)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
