"""Minimal dense-tensor engine with reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Graph` is active (used as
a context manager) and at least one operand requires a gradient, the op records
itself onto that graph; :func:`backward` then replays the graph in reverse.

Outside an active graph every op is a plain numpy computation, which is what the
inference paths (feature extraction, routing tables, deployment) rely on.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "GraphError", "backward", "fd_gradient",
    "zero_grad", "current_graph", "no_grad", "as_tensor", "detach",
    "matmul", "add", "sub", "mul", "div", "add_bias", "mul_rows", "scale",
    "transpose", "reshape", "softmax", "log_softmax", "layer_norm", "gelu",
    "gather_rows", "scatter_rows", "sum", "mean", "var", "l2_norm", "square",
    "normal_cdf",
]

LN_EPS = 1e-6
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class GraphError(RuntimeError):
    pass


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name",
                 "_graph", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name
        self._graph: Graph | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar for the common cases
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)
    __rmul__ = __mul__
    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


_state = threading.local()


def _stack() -> list:
    st = getattr(_state, "stack", None)
    if st is None:
        st = _state.stack = []
    return st


def current_graph() -> "Graph | None":
    st = _stack()
    return st[-1] if st else None


class Graph:
    """Topologically ordered record of primitive applications.

    ``rng`` is seeded from ``seed`` so stochastic pieces of a forward pass
    (masks, gate noise) replay identically for equal seeds.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.nodes: list[Tensor] = []
        self.differentiated = False

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Suspend recording: ops inside run as plain numpy."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).data)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    g = current_graph()
    if g is None or not any(p.requires_grad for p in parents):
        return out
    for p in parents:
        if p.requires_grad and p._graph is not None and p._graph is not g:
            raise GraphError(
                f"tensor from another graph used as input (node {p.node_id}); "
                "detach it or rebuild it in the active graph")
    out.requires_grad = True
    out._graph = g
    out._parents = tuple(parents)
    out._backward = backward_fn
    out.node_id = len(g.nodes)
    g.nodes.append(out)
    return out


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Returns ``{id(leaf): grad}`` for the leaves reached in this call.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._graph is not graph:
        raise GraphError("loss was not produced by this graph (detached tensor)")
    if graph.differentiated:
        raise GraphError("backward already ran on this graph; build a new graph")
    graph.differentiated = True

    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    reached: dict[int, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._graph is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                reached[id(parent)] = parent.grad
            elif parent._graph is graph:
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg
            else:
                raise GraphError("detached tensor encountered during backward")
    return reached


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------- primitives

def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if (a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def bw(g):
        return (g @ _swap(B) if a.requires_grad else None,
                _swap(A) @ g if b.requires_grad else None)
    return _record(A @ B, (a, b), bw)


def _same(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(name, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("mul", a, b)
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("div", a, b)
    A, B = a.data, b.data
    out = A / B
    return _record(out, (a, b), lambda g: (g / B, -g * out / B))


def add_bias(x, b) -> Tensor:
    """Row-wise bias: ``b`` (D,) added along the last axis of ``x`` (..., D)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError("add_bias", x.shape, b.shape)
    lead = tuple(range(x.ndim - 1))
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def mul_rows(x, w) -> Tensor:
    """Scale row ``i`` of ``x`` (R, D) by ``w[i]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError("mul_rows", x.shape, w.shape)
    X, W = x.data, w.data
    return _record(X * W[:, None], (x, w),
                   lambda g: (g * W[:, None], (g * X).sum(axis=1)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),))


def _check_axis(name: str, x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(name, x.shape, (axis,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis("softmax", x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis("log_softmax", x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    s = np.exp(out)
    return _record(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, weight=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis; ``eps`` sits inside the square root."""
    x = as_tensor(x)
    D = x.shape[-1]
    parents = [x]
    if weight is not None:
        weight = as_tensor(weight)
        if weight.shape != (D,):
            raise ShapeError("layer_norm", x.shape, weight.shape)
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (D,):
            raise ShapeError("layer_norm", x.shape, bias.shape)
        parents.append(bias)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat if weight is None else xhat * weight.data
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(X.ndim - 1))

    def bw(g):
        gh = g if weight is None else g * weight.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads
    return _record(out, parents, bw)


def gelu(x) -> Tensor:
    """tanh approximation."""
    x = as_tensor(x)
    X = x.data
    X2 = X * X
    u = _SQRT_2_OVER_PI * X * (1.0 + 0.044715 * X2)
    t = np.tanh(u)
    out = 0.5 * X * (1.0 + t)

    def bw(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * X2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)
    return _record(out, (x,), bw)


def gather_rows(x, idx) -> Tensor:
    """``x[idx]`` along axis 0; repeated indices broadcast a row."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0])):
        raise ShapeError("gather_rows", x.shape, idx.shape)
    shape = x.shape

    unique = np.unique(idx).size == idx.size

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if unique:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)
    return _record(x.data[idx], (x,), bw)


def scatter_rows(x, idx, n: int) -> Tensor:
    """Rows of ``x`` summed into a zero array of ``n`` rows at positions ``idx``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0] or (idx.size and idx.max() >= n):
        raise ShapeError("scatter_rows", x.shape, idx.shape)
    out = np.zeros((n,) + x.shape[1:], dtype=x.data.dtype)
    if np.unique(idx).size == idx.size:
        out[idx] = x.data
    else:
        np.add.at(out, idx, x.data)
    return _record(out, (x,), lambda g: (g[idx],))


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _record(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def var(x, axis: int | None = None) -> Tensor:
    """Population variance (ddof=0)."""
    x = as_tensor(x)
    X = x.data
    mu = X.mean(axis=axis, keepdims=True)
    count = X.size if axis is None else X.shape[axis]
    out = np.asarray(((X - mu) ** 2).mean(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * 2.0 * (X - mu) / count,)
    return _record(out, (x,), bw)


def l2_norm(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    X = x.data
    n = np.sqrt((X * X).sum(axis=axis, keepdims=True))
    out = np.asarray(n.reshape(()) if axis is None else np.squeeze(n, axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * X / n,)
    return _record(out, (x,), bw)


def square(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return _record(X * X, (x,), lambda g: (2.0 * g * X,))


def normal_cdf(x) -> Tensor:
    """Standard normal CDF, elementwise."""
    from scipy.special import ndtr

    x = as_tensor(x)
    X = x.data
    pdf = np.exp(-0.5 * X * X) / np.sqrt(2.0 * np.pi)
    return _record(ndtr(X), (x,), lambda g: (g * pdf,))
