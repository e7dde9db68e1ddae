"""Reverse-mode automatic differentiation over dense float64 arrays.

Every forward op builds a node that remembers its parents and a vector-Jacobian
closure.  ``backward`` orders the reachable nodes topologically (this ordered
list is the computation tape) and walks it once in reverse.  Graphs are rebuilt
on every forward pass, so there is no shared mutable state between tapes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LN2 = float(np.log(2.0))
NORM_EPS = 1e-12
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")
    # make ndarray (op) Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def parents(self) -> tuple[Tensor, ...]:
        return self._parents

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _node(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(p)
    return _node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def ssp(a) -> Tensor:
    """Shifted softplus, softplus(a) - ln 2, so that ssp(0) == 0."""
    a = as_tensor(a)
    ad = a.data
    return _node(np.logaddexp(0.0, ad) - LN2, (a,), lambda g: (g * _sigmoid(ad),), "ssp")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(a, lo: float, hi: float) -> Tensor:
    # zero gradient outside [lo, hi]
    a = as_tensor(a)
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _node(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes differ, {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), vjp, "matmul")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "mean")


def norm(a, axis=-1, keepdims: bool = False, eps: float = NORM_EPS) -> Tensor:
    """sqrt(sum(a**2) + eps) along ``axis``; smooth at the origin."""
    a = as_tensor(a)
    ad = a.data
    out_k = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True) + eps)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * ad / out_k,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return _node(out, (a,), vjp, "norm")


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis; no affine terms."""
    a = as_tensor(a)
    ad = a.data
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), vjp, "layer_norm")


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, vjp, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    old = a.shape
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as e:
        raise ShapeError(f"getitem: {e} for shape {shape}") from None

    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (a,), vjp, "getitem")


def _is_basic_index(idx) -> bool:
    # basic indexing never repeats an element, so assignment equals accumulation
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def gather(a, index) -> Tensor:
    """Rows of ``a`` selected by an integer index list (axis 0)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError(f"gather: index out of range for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), vjp, "gather")


def scatter_add(a, index, n: int) -> Tensor:
    """out[index[e]] += a[e]; output has ``n`` rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_add: index length {index.shape[0]} vs rows {a.shape}")
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, index, a.data)
    return _node(out, (a,), lambda g: (g[index],), "scatter_add")


def segment_mean(a, index, n: int) -> Tensor:
    """Mean of rows sharing a segment id; empty segments give zeros."""
    index = np.asarray(index, dtype=np.int64)
    counts = np.bincount(index, minlength=n).astype(np.float64)
    counts = np.maximum(counts, 1.0).reshape((n,) + (1,) * (as_tensor(a).ndim - 1))
    return div(scatter_add(a, index, n), counts)


# ---------------------------------------------------------------- backward


def tape_of(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``root`` that need gradients."""
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(leaf) to every requires_grad leaf; sets ``leaf.grad``."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    order = tape_of(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            leaves[node] = g
            continue
        for p, gp in zip(node._parents, node._vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    return leaves


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. ``wrt``; unreached tensors get zeros."""
    wrt = list(wrt)
    if root.size != 1:
        raise ShapeError(f"grad: root must be a scalar, got shape {root.shape}")
    got = backward(root) if root.requires_grad else {}
    return [got.get(t, np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------- checking


@dataclass
class GradCheck:
    max_rel_error: float
    worst_index: tuple | None
    kinks: list[tuple] = field(default_factory=list)
    nonfinite_at: tuple | None = None

    @property
    def finite(self) -> bool:
        return self.nonfinite_at is None

    def ok(self, tol: float = 1e-4) -> bool:
        return self.finite and self.max_rel_error < tol


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    coords: Iterable[tuple] | None = None,
    kink_tol: float = 1e-2,
) -> GradCheck:
    """Compare reverse-mode gradient of scalar ``f`` with central differences.

    Relative error per coordinate is |analytic - cd| / (|cd| + 1e-12).  A
    coordinate is reported as a kink when the forward and backward one-sided
    differences disagree by more than ``kink_tol`` (scaled by max(1, |cd|)).
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    y = f(x)
    f0 = float(y.item())
    if not np.isfinite(f0):
        return GradCheck(np.inf, None, nonfinite_at=())
    analytic = grad(y, [x])[0]
    idxs = list(coords) if coords is not None else list(np.ndindex(x0.shape))
    worst, worst_idx, kinks = 0.0, None, []
    for idx in idxs:
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += step
        xm[idx] -= step
        fp, fm = float(f(Tensor(xp)).item()), float(f(Tensor(xm)).item())
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradCheck(np.inf, tuple(idx), kinks, nonfinite_at=tuple(idx))
        cd = (fp - fm) / (2 * step)
        if abs((fp - f0) / step - (f0 - fm) / step) > kink_tol * max(1.0, abs(cd)):
            kinks.append(tuple(idx))
        err = abs(analytic[idx] - cd) / (abs(cd) + 1e-12)
        if err > worst or worst_idx is None:
            worst, worst_idx = err, tuple(idx)
    return GradCheck(worst, worst_idx, kinks)
