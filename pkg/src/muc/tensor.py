"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive records its parents and a closure mapping the output gradient
to per-parent gradients. ``backward`` replays those closures in reverse
topological order, summing contributions from shared subexpressions.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

_state = {"dtype": np.dtype(np.float32), "grad": True}


def default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for new parameters and constants."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

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
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def record(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a custom primitive: ``backward(g)`` returns one gradient (or None) per parent."""
    return _result(np.asarray(data), parents, backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- backward engine -------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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


def _backprop(root: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _toposort(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = (node, g)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            pending[k] = pending[k] + pg if k in pending else pg
    assert not pending, "graph contained a cycle"
    return leaves


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    for node, g in _backprop(root).values():
        g = np.array(g, dtype=node.dtype, copy=True)
        node.grad = g if node.grad is None else node.grad + g


def grad(root: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradient map of ``root`` over ``leaves``; unreachable leaves get zeros."""
    found = _backprop(root)
    out = []
    for leaf in leaves:
        hit = found.get(id(leaf))
        out.append(np.zeros_like(leaf.data) if hit is None else np.array(hit[1], dtype=leaf.dtype))
    return out


# -- elementwise arithmetic -----------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = special.expit(ad)
    return _result(ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),), "silu")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    ad = a.data
    cdf = 0.5 * (1.0 + special.erf(ad * _INV_SQRT2))

    def bw(g):
        return (g * (cdf + ad * _INV_SQRT2PI * np.exp(-0.5 * ad * ad)),)

    return _result(ad * cdf, (a,), bw, "gelu")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(np.where(mask, g, 0), sa), _unbroadcast(np.where(mask, 0, g), sb))

    return _result(np.where(mask, a.data, b.data), (a, b), bw, "where")


# -- reductions and shape ops ----------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def split(a: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    size = a.shape[axis] // n
    axis = axis % a.ndim
    out = []
    for i in range(n):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i * size, (i + 1) * size)
        out.append(getitem(a, tuple(sl)))
    return out


def pad_axis(a: Tensor, before: int, after: int, axis: int, value: float = 0.0) -> Tensor:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    n = a.shape[axis]
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + n)
    sl = tuple(sl)
    return _result(np.pad(a.data, widths, constant_values=value), (a,),
                   lambda g: (g[sl],), "pad")


def repeat(a: Tensor, r: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling: each entry along ``axis`` repeated ``r`` times."""
    axis = axis % a.ndim
    shape = a.shape

    def bw(g):
        gs = g.reshape(shape[:axis] + (shape[axis], r) + shape[axis + 1:])
        return (gs.sum(axis=axis + 1),)

    return _result(np.repeat(a.data, r, axis=axis), (a,), bw, "repeat")


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    shape, dtype = table.shape, table.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), bw, "embedding")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


# -- fused numerics ---------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    out = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


def normalize(a: Tensor, axes, eps: float) -> Tensor:
    """Zero-mean, unit-variance standardisation over ``axes`` (biased variance)."""
    axes = axes if isinstance(axes, tuple) else (axes,)
    x = a.data
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * rstd

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (rstd * (g - gm - xhat * gx),)

    return _result(xhat, (a,), bw, "normalize")


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Direct 1-D convolution over time.

    x: (B, T, Cin), w: (K, Cin, Cout) -> (B, T_out, Cout) with
    T_out = (T + pad_left + pad_right - K) // stride + 1.
    """
    K, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    xp = np.pad(x.data, ((0, 0), pad, (0, 0))) if any(pad) else x.data
    B, Tp, _ = xp.shape
    tout = (Tp - K) // stride + 1
    if tout < 1:
        raise ValueError("input too short for convolution")
    span = stride * (tout - 1) + 1
    wd = w.data
    out = np.zeros((B, tout, cout), dtype=np.result_type(xp, wd))
    for k in range(K):
        out += xp[:, k:k + span:stride] @ wd[k]

    def bw(g):
        gw = gx = None
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            gw = np.empty_like(wd)
            for k in range(K):
                gw[k] = xp[:, k:k + span:stride].reshape(-1, cin).T @ g2
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + span:stride] += g @ wd[k].T
            gx = gxp[:, pad[0]:Tp - pad[1]]
        return gx, gw

    return _result(out, (x, w), bw, "conv1d")


def depthwise_conv1d(x: Tensor, w: Tensor, pad: tuple[int, int]) -> Tensor:
    """Per-channel convolution over time, stride 1. x: (B, T, C), w: (K, C)."""
    K, C = w.shape
    xp = np.pad(x.data, ((0, 0), pad, (0, 0)))
    B, Tp, _ = xp.shape
    tout = Tp - K + 1
    wd = w.data
    out = np.zeros((B, tout, C), dtype=np.result_type(xp, wd))
    for k in range(K):
        out += xp[:, k:k + tout] * wd[k]

    def bw(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.stack([(xp[:, k:k + tout] * g).sum(axis=(0, 1)) for k in range(K)])
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + tout] += g * wd[k]
            gx = gxp[:, pad[0]:Tp - pad[1]]
        return gx, gw

    return _result(out, (x, w), bw, "depthwise_conv1d")
