"""Reverse-mode differentiation over batched channel grids.

Operations run eagerly on numpy arrays. While a :class:`DiffGraph` is active,
every operation touching a tracked tensor appends a node holding a backward
closure; :func:`backward` walks those nodes in reverse and returns gradients
for the trainable leaves. Closures capture only the arrays their backward
pass needs, so intermediate grids are freed as soon as the caller drops them.

Broadcasting is refused except against scalars.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels

_uid = itertools.count()
_GRAPH_STACK: list["DiffGraph"] = []

# test-harness hook: scales the input gradient of conv2d_circular
_CONV_BACKWARD_SCALE = 1.0


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """An array plus the bookkeeping needed to route gradients to it."""

    __slots__ = ("data", "requires_grad", "name", "uid", "_graph")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.uid = next(_uid)
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class DiffGraph:
    """Ordered record of operations, consumed by one call to :func:`backward`."""

    def __init__(self):
        self.nodes: list[tuple] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _GRAPH_STACK.remove(self)
        return False

    def __len__(self):
        return len(self.nodes) if self.nodes is not None else 0

    def _key(self, t: Tensor):
        if t._graph is self:
            return t.uid
        if t.requires_grad and t._graph is None:
            self.leaves.setdefault(t.uid, t)
            return t.uid
        if t._graph is not None:
            raise GraphError(f"{t!r} was recorded on a different graph")
        return None


def active_graph() -> DiffGraph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None:
        arr = arr.astype(like.dtype, copy=False)
    return Tensor(arr)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    """Wrap ``out``; when a graph is recording and an input is tracked, log a node."""
    result = Tensor(out)
    graph = active_graph()
    if graph is None or graph.consumed:
        return result
    keys = [graph._key(t) for t in inputs]
    if all(k is None for k in keys):
        return result
    result.requires_grad = True
    result._graph = graph
    graph.nodes.append((op, keys, result.uid, backward))
    return result


class Gradients(dict):
    """Maps each trainable leaf :class:`Tensor` to its gradient array."""

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items()}


def backward(loss: Tensor, graph: DiffGraph | None = None) -> Gradients:
    """Accumulate d(loss)/d(leaf) over the recorded graph.

    A graph can be differentiated once; its saved values are released after.
    """
    graph = graph if graph is not None else loss._graph
    if graph is None:
        raise GraphError("loss is not attached to any recorded graph")
    if graph.consumed:
        raise GraphError("graph already consumed by an earlier backward(); re-record it")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._graph is not graph:
        raise GraphError("loss was not recorded on this graph")

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for _op, keys, out_key, fn in reversed(graph.nodes):
        g = grads.pop(out_key, None)
        if g is None:
            continue
        for key, gi in zip(keys, fn(g)):
            if key is None or gi is None:
                continue
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    result = Gradients()
    for uid, leaf in graph.leaves.items():
        g = grads.get(uid)
        result[leaf] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
    graph.consumed = True
    graph.nodes = None
    return result


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_operands(x, y, op):
    if not isinstance(x, Tensor) and isinstance(y, Tensor):
        x = as_tensor(x, like=y)
    x = as_tensor(x)
    y = as_tensor(y, like=x)
    if x.shape != y.shape and x.data.ndim != 0 and y.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} differ (only scalars broadcast)")
    return x, y


def _unbroadcast(g, shape):
    return g.sum().reshape(shape) if g.shape != shape else g


def add(x, y) -> Tensor:
    x, y = _binary_operands(x, y, "add")
    xs, ys = x.shape, y.shape
    return _record("add", (x, y), x.data + y.data,
                   lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)))


def sub(x, y) -> Tensor:
    x, y = _binary_operands(x, y, "sub")
    xs, ys = x.shape, y.shape
    return _record("sub", (x, y), x.data - y.data,
                   lambda g: (_unbroadcast(g, xs), _unbroadcast(-g, ys)))


def mul(x, y) -> Tensor:
    x, y = _binary_operands(x, y, "mul")
    a, b = x.data, y.data
    xs, ys = x.shape, y.shape
    need_a = active_graph() is not None and (y.requires_grad or y._graph is not None)
    need_b = active_graph() is not None and (x.requires_grad or x._graph is not None)
    # keep a factor alive only when the other side can receive a gradient
    sa = a if need_a else None
    sb = b if need_b else None
    return _record("mul", (x, y), a * b,
                   lambda g: (_unbroadcast(g * sb, xs) if sb is not None else None,
                              _unbroadcast(g * sa, ys) if sa is not None else None))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", (x,), -x.data, lambda g: (-g,))


def scale(x, a: float) -> Tensor:
    x = as_tensor(x)
    a = float(a)
    return _record("scale", (x,), x.data * x.dtype.type(a), lambda g: (g * g.dtype.type(a),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _record("relu", (x,), out, lambda g: (g * (out > 0),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split form stays finite for large |d|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _record("square", (x,), d * d, lambda g: (2 * g * d,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _record("clamp", (x,), np.clip(d, lo, hi), lambda g: (g * inside,))


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "neg": neg, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, x, y=None, **params) -> Tensor:
    """Dispatch by name: add/sub/mul take ``y``; clamp takes lo/hi; scale takes a."""
    if op in _BINARY:
        if y is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](x, y)
    if op in _UNARY:
        return _UNARY[op](x)
    if op == "clamp":
        return clamp(x, params["lo"], params["hi"])
    if op == "scale":
        return scale(x, params["a"])
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------

def sum(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    return _record("sum", (x,), np.asarray(x.data.sum(), dtype=dtype),
                   lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, dtype, n = x.shape, x.dtype, x.data.size
    return _record("mean", (x,), np.asarray(x.data.mean(), dtype=dtype),
                   lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels of an empty list")
    xs = [as_tensor(t) for t in xs]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    return _record("concat", xs, np.concatenate([t.data for t in xs], axis=1),
                   lambda g: tuple(np.split(g, splits, axis=1)))


def select_channels(x, index: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    C = x.shape[1]
    if idx.size and (idx.min() < -C or idx.max() >= C):
        raise IndexError(f"channel index {list(index)} out of range for {C} channels")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _record("select", (x,), x.data[:, idx], bw)


def expand_channels(x, channels: int) -> Tensor:
    """Repeat a one-channel grid across ``channels`` (explicit broadcast)."""
    x = as_tensor(x)
    if x.shape[1] != 1:
        raise ShapeError(f"expand_channels needs a single channel, got {x.shape}")
    out = np.repeat(x.data, channels, axis=1)
    return _record("expand", (x,), out, lambda g: (g.sum(axis=1, keepdims=True),))


def channel_softmax(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if not np.all(np.isfinite(d)):
        raise FloatingPointError("channel_softmax on non-finite input")
    e = np.exp(d - d.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)
    return _record("softmax", (x,), out,
                   lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),))


def avg_pool(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor == 1:
        return x
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool: spatial {H}x{W} not divisible by {factor}")
    f = factor
    out = x.data.reshape(B, C, H // f, f, W // f, f).mean(axis=(3, 5))

    def bw(g):
        g = np.repeat(np.repeat(g, f, axis=2), f, axis=3)
        return (g / g.dtype.type(f * f),)

    return _record("avg_pool", (x,), out, bw)


def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` (numpy semantics, equal ranks, no broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    A, Bm = a.data, b.data
    return _record("matmul", (a, b), A @ Bm,
                   lambda g: (g @ np.swapaxes(Bm, -1, -2), np.swapaxes(A, -1, -2) @ g))


def sort_last(x) -> Tensor:
    """Sort along the last axis; the permutation is treated as constant."""
    x = as_tensor(x)
    perm = np.argsort(x.data, axis=-1, kind="stable")
    out = np.take_along_axis(x.data, perm, axis=-1)

    def bw(g):
        gx = np.empty_like(g)
        np.put_along_axis(gx, perm, g, axis=-1)
        return (gx,)

    return _record("sort", (x,), out, bw)


def take_last(x, index) -> Tensor:
    """Gather ``x[..., index]`` with a fixed 1-D index array."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (..., idx), g)
        return (gx,)

    return _record("take", (x,), x.data[..., idx], bw)


def gram(f) -> Tensor:
    """Channel inner products normalised by pixel count: (B,F,h,w) -> (B,F,F)."""
    f = as_tensor(f)
    B, F, h, w = f.shape
    n = h * w
    X = f.data.reshape(B, F, n)
    out = X @ np.swapaxes(X, 1, 2) / X.dtype.type(n)

    def bw(g):
        gs = g + np.swapaxes(g, 1, 2)
        return ((gs @ X / X.dtype.type(n)).reshape(B, F, h, w),)

    return _record("gram", (f,), out, bw)


# ---------------------------------------------------------------------------
# per-cell dense layer and circular convolution
# ---------------------------------------------------------------------------

def per_cell_dense(x, W, b=None) -> Tensor:
    """Apply ``W @ x[:, :, i, j] + b`` at every cell: (B,Cin,H,W) -> (B,Cout,H,W)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 4 or W.ndim != 2 or W.shape[1] != x.shape[1]:
        raise ShapeError(f"per_cell_dense: weight {W.shape} does not match input {x.shape}")
    Bn, Cin, H, Wd = x.shape
    Cout = W.shape[0]
    X = x.data.reshape(Bn, Cin, H * Wd)
    Wm = W.data
    out = np.matmul(Wm, X)
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Cout,):
            raise ShapeError(f"per_cell_dense: bias {b.shape} does not match {Cout} outputs")
        out += b.data[:, None]
        inputs.append(b)
    out = out.reshape(Bn, Cout, H, Wd)
    graph = active_graph()
    keep_x = graph is not None and (W.requires_grad or W._graph is not None)

    Xs = X if keep_x else None

    def bw(g):
        G = g.reshape(Bn, Cout, H * Wd)
        gx = np.matmul(Wm.T, G).reshape(Bn, Cin, H, Wd)
        gW = np.matmul(G, np.swapaxes(Xs, 1, 2)).sum(axis=0) if Xs is not None else None
        if b is None:
            return gx, gW
        return gx, gW, G.sum(axis=(0, 2))

    return _record("dense", inputs, out, bw)


@dataclass
class Kernel:
    """Convolution weights (out, in/groups, kh, kw) with group count and dilation."""

    weight: object
    groups: int = 1
    dilation: int = 1

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        w = self.weight
        if w.ndim != 4:
            raise ShapeError(f"kernel weight must be 4-D, got {w.shape}")
        kh, kw = w.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.groups < 1 or w.shape[0] % self.groups:
            raise ShapeError(f"{w.shape[0]} output channels not divisible into {self.groups} groups")


def conv2d_circular(x, k: Kernel) -> Tensor:
    """Cross-correlation with toroidal wrap; output keeps the input's spatial size."""
    x = as_tensor(x)
    w = k.weight
    if x.ndim != 4:
        raise ShapeError(f"conv2d_circular expects (B,C,H,W), got {x.shape}")
    B, C, H, Wd = x.shape
    O, Ig, kh, kw = w.shape
    G = k.groups
    if C != Ig * G:
        raise ShapeError(f"conv2d_circular: input {x.shape} does not fit kernel {w.shape} "
                         f"with groups={G}")
    d = k.dilation
    wdata = w.data.astype(x.dtype, copy=False)
    track_w = active_graph() is not None and (w.requires_grad or w._graph is not None)

    if Ig == 1 and G == C:
        w3 = wdata.reshape(O, kh, kw)
        out = _kernels.dw_forward(x.data, w3, d)
        xs = x.data if track_w else None

        def bw(g):
            gx = _kernels.dw_backward_input(g, w3, d, C)
            if _CONV_BACKWARD_SCALE != 1.0:
                gx = gx * gx.dtype.type(_CONV_BACKWARD_SCALE)
            gw = None
            if xs is not None:
                gw = _kernels.dw_backward_weight(g, xs, d, kh, kw).reshape(O, 1, kh, kw)
            return gx, gw

        return _record("conv", (x, w), out, bw)

    # general grouped path via shifted-copy columns
    Og = O // G
    ry, rx = kh // 2, kw // 2
    offsets = [((ty - ry) * d, (tx - rx) * d) for ty in range(kh) for tx in range(kw)]
    T = len(offsets)
    xg = x.data.reshape(B, G, Ig, H, Wd)
    cols = np.stack([np.roll(xg, (-oy, -ox), axis=(3, 4)) for oy, ox in offsets], axis=3)
    cols = cols.reshape(B, G, Ig * T, H * Wd)
    wm = wdata.reshape(G, Og, Ig * T)
    out = np.matmul(wm, cols).reshape(B, O, H, Wd)
    cols_saved = cols if track_w else None
    del cols

    def bw_general(g):
        gg = g.reshape(B, G, Og, H * Wd)
        gcol = np.matmul(np.swapaxes(wm, 1, 2), gg).reshape(B, G, Ig, T, H, Wd)
        gx = np.zeros((B, G, Ig, H, Wd), dtype=g.dtype)
        for t, (oy, ox) in enumerate(offsets):
            gx += np.roll(gcol[:, :, :, t], (oy, ox), axis=(3, 4))
        gx = gx.reshape(B, C, H, Wd)
        if _CONV_BACKWARD_SCALE != 1.0:
            gx = gx * gx.dtype.type(_CONV_BACKWARD_SCALE)
        gw = None
        if cols_saved is not None:
            gw = np.matmul(gg, np.swapaxes(cols_saved, 2, 3)).sum(axis=0)
            gw = gw.reshape(G, Og, Ig, kh, kw).reshape(O, Ig, kh, kw)
        return gx, gw

    return _record("conv", (x, w), out, bw_general)
