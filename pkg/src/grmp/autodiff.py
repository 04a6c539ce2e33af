"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new immutable :class:`Tensor`. When any input
requires a gradient the result keeps a reference to its inputs together with
a vector-Jacobian product closure; :func:`backward` walks the recorded graph
from a scalar sink. Node ids increase monotonically with creation, so sorting
reachable nodes by id is a valid topological order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_EPS = 1e-12
NORM_EPS = 1e-12
COS_EPS = 1e-8
LN_EPS = 1e-5

_GELU_C = np.sqrt(2.0 / np.pi)
_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "op", "_inputs", "_vjp")

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _inputs: tuple = (), _vjp: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = op
        self._inputs = _inputs
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _make(data, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(data, True, op=op, _inputs=tuple(inputs), _vjp=vjp)
    return Tensor(data, False, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), vjp, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the input clamped from below at ``eps``."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, eps)
    live = a.data > eps

    def vjp(g):
        return (np.where(live, g / clamped, 0.0),)

    return _make(np.log(clamped), (a,), vjp, "log")


def gelu_tanh(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), vjp, "gelu_tanh")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; ``axis=0`` stacks rows."""
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, vjp, "concat")


def getitem(a, idx) -> Tensor:
    """Indexing and slicing; ``a[i:j]`` takes rows i to j."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError:
        raise ShapeError("getitem", a.shape) from None

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), vjp, "getitem")


def slice_rows(a, start: int, stop: int) -> Tensor:
    return getitem(a, slice(start, stop))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalizations

def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def layer_norm(a, eps: float = LN_EPS) -> Tensor:
    """Zero-mean, unit-variance normalization over the last axis (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), vjp, "layer_norm")


def l2_normalize(a, eps: float = NORM_EPS) -> Tensor:
    """Scale to unit L2 norm over the last axis."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(n, eps)
    out = a.data / denom
    live = n > eps

    def vjp(g):
        radial = np.where(live, (g * out).sum(axis=-1, keepdims=True), 0.0)
        return ((g - out * radial) / denom,)

    return _make(out, (a,), vjp, "l2_normalize")


def cosine_similarity(a, b, eps: float = COS_EPS) -> Tensor:
    """Cosine similarity over the last axis, broadcasting leading axes.

    Each norm is floored at ``eps`` so a zero vector has similarity 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    _broadcast_shape("cosine_similarity", a, b)
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    ua, ub = np.maximum(na, eps), np.maximum(nb, eps)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (ua * ub)

    def vjp(g):
        g = g[..., None]
        ga = g * (b.data / (ua * ub) - np.where(na > eps, cos * a.data / (ua * ua), 0.0))
        gb = g * (a.data / (ua * ub) - np.where(nb > eps, cos * b.data / (ub * ub), 0.0))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(cos[..., 0], (a, b), vjp, "cosine_similarity")


# ---------------------------------------------------------------- backward

def _reachable(sink: Tensor) -> list[Tensor]:
    seen = {sink.node_id: sink}
    stack = [sink]
    while stack:
        node = stack.pop()
        for inp in node._inputs:
            if inp.requires_grad and inp.node_id not in seen:
                seen[inp.node_id] = inp
                stack.append(inp)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(sink: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``sink`` w.r.t. every reachable trainable leaf.

    Returns ``{leaf.node_id: gradient}``; leaves created with
    ``requires_grad=False`` never appear.
    """
    if sink.shape != ():
        raise ValueError(f"backward: sink must be a scalar, got shape {sink.shape}")
    grads: dict[int, np.ndarray] = {sink.node_id: np.ones(())}
    leaves: dict[int, np.ndarray] = {}
    if not sink.requires_grad:
        return leaves
    for node in _reachable(sink):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[node.node_id] = np.array(g, dtype=np.float64)
            continue
        for inp, gi in zip(node._inputs, node._vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = gi if prev is None else prev + gi
    return leaves


def grad(sink: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Convenience wrapper: gradients of ``sink`` for each tensor in ``wrt``.

    Leaves that do not influence the sink get a zero array.
    """
    g = backward(sink)
    return [g.get(t.node_id, np.zeros(t.shape)) for t in wrt]


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray],
               h: float = 1e-5,
               names: Iterable[str] | None = None,
               max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between backward and central differences.

    ``f`` maps a dict of leaf Tensors to a scalar Tensor and must be
    deterministic. ``names`` picks the entries to check (default: all); with
    ``max_coords`` only that many coordinates per entry are sampled. The error
    is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"grad_check: step h={h} outside [1e-7, 1e-3]")
    names = list(params) if names is None else list(names)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=(k in names)) for k, v in base.items()}
    out = f(leaves)
    g = backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        analytic = g.get(leaves[name].node_id, np.zeros(base[name].shape)).ravel()
        size = base[name].size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        for c in coords:
            vals = []
            for sign in (1.0, -1.0):
                probe = dict(base)
                arr = base[name].copy()
                arr.reshape(-1)[c] += sign * h
                probe[name] = arr
                vals.append(f({k: Tensor(v) for k, v in probe.items()}).item())
            numeric = (vals[0] - vals[1]) / (2 * h)
            err = abs(analytic[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
