"""Dense tensors with define-by-run reverse-mode autodiff.

Every op builds a node on the fly; ``backward`` walks the nodes in reverse
topological order and accumulates gradients additively across fan-out.
Arrays are numpy ndarrays; leading dimensions act as batch dimensions.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32/float64)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _raise_nonscalar():
    raise ValueError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    # a single reduction catches NaN/Inf; the elementwise test only rules out sum overflow
    if not math.isfinite(float(data.sum())) and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _DTYPE else data.astype(_DTYPE)
    out.grad = None
    out.name = None
    out._op = op
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * _DTYPE(c), (a,), bw, "scale")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    dt = xd.dtype.type
    x2 = xd * xd
    t = np.tanh(xd * (dt(_GELU_C) + dt(_GELU_C * _GELU_A) * x2))
    half_xd = dt(0.5) * xd
    out = half_xd + half_xd * t

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) * c (1 + 3 a x^2)
        d = (dt(1.0) - t * t) * (dt(_GELU_C) + dt(3 * _GELU_C * _GELU_A) * x2)
        d *= half_xd
        d += dt(0.5)
        d += dt(0.5) * t
        d *= g
        return (d,)

    return _make(out, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` by an integer index (scalar or array)."""
    index = np.asarray(index)
    ax = axis % x.ndim
    unique = index.ndim == 0 or len(np.unique(index)) == index.size

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        moved = np.moveaxis(full, ax, 0)
        g_moved = np.moveaxis(g, ax, 0) if index.ndim else g
        if unique:
            moved[index] = g_moved
        else:
            np.add.at(moved, index, g_moved)
        return (full,)

    return _make(np.take(x.data, index, axis=ax), (x,), bw, "take")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape

    def bw(g):
        return (unbroadcast(g, src),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), bw, "broadcast")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    count = x.size if axis is None else np.prod([src[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def max_pool_axis(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal element."""
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(np.squeeze(out, ax), (x,), bw, "max_pool")


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # activations @ weight: one flat GEMM instead of a stacked one
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out); any leading dims on ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        grads = [gx, x2.T @ g2 if weight.requires_grad else None]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, parents, bw, "linear")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the affine."""
    xd = x.data
    xhat = xd - xd.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / xd.shape[-1]
    rstd = 1.0 / np.sqrt(var + eps)
    xhat *= rstd
    if gamma is None and beta is None:
        out = xhat
    else:
        out = xhat * gamma.data if gamma is not None else xhat.copy()
        if beta is not None:
            out += beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        gx_hat = g * gamma.data if gamma is not None else g
        proj = np.einsum("...i,...i->...", gx_hat, xhat)[..., None] / xd.shape[-1]
        gx = gx_hat - gx_hat.mean(axis=-1, keepdims=True)
        gx -= xhat * proj
        gx *= rstd
        grads = [gx]
        if gamma is not None:
            grads.append(unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(unbroadcast(g, beta.shape))
        return tuple(grads)

    return _make(out, parents, bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def bw(g):
        gs = g * s
        gs -= s * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return _make(s, (x,), bw, "softmax")


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention over the last two axes, any leading dims.

    ``q``, ``k``, ``v`` are ``[..., heads, n, dh]``.
    """
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1]) or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Stochastic depth: zero a whole residual branch per sample (axis 0)."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape[0]) < keep).astype(_DTYPE) / _DTYPE(keep)
    return mul(x, Tensor(mask.reshape((-1,) + (1,) * (x.ndim - 1))))


# ---------------------------------------------------------------------------
# Chamfer-L2 as a differentiable op
# ---------------------------------------------------------------------------

def chamfer_l2(pred: Tensor, gt: Tensor) -> Tensor:
    """Per-item Chamfer-L2 between batched clouds ``[..., N, 3]`` and ``[..., M, 3]``.

    Returns a tensor of shape ``[...]``. Shares its kernel with
    :func:`deformpic.geometry.chamfer_l2`.
    """
    from .geometry import chamfer_kernel

    pred, gt = as_tensor(pred), as_tensor(gt)
    value, nn_ab, nn_ba, diff = chamfer_kernel(pred.data, gt.data)

    def bw(g):
        n, m = pred.shape[-2], gt.shape[-2]
        g = np.asarray(g)[..., None, None]
        # diff[..., i, j, :] = a_i - b_j
        d_ab = np.take_along_axis(diff, nn_ab[..., None, None], axis=-2)[..., 0, :]
        d_ba = np.take_along_axis(diff, nn_ba[..., None, :, None], axis=-3)[..., 0, :, :]
        ga = d_ab * (2.0 / n)
        gb = d_ba * (-2.0 / m)
        _scatter_add_last2(ga, nn_ba, d_ba * (2.0 / m))
        _scatter_add_last2(gb, nn_ab, d_ab * (-2.0 / n))
        return ga * g, gb * g

    return _make(value, (pred, gt), bw, "chamfer_l2")


def _scatter_add_last2(target: np.ndarray, index: np.ndarray, values: np.ndarray) -> None:
    """``target[..., index[..., i], :] += values[..., i, :]`` for batched index."""
    lead = index.shape[:-1]
    flat_t = target.reshape((-1,) + target.shape[-2:])
    flat_i = index.reshape(-1, index.shape[-1])
    flat_v = values.reshape((-1,) + values.shape[-2:])
    rows = np.repeat(np.arange(flat_i.shape[0]), flat_i.shape[1])
    np.add.at(flat_t, (rows, flat_i.reshape(-1)), flat_v.reshape(-1, flat_v.shape[-1]))
    target[...] = flat_t.reshape(lead + target.shape[-2:])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``root``."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # release the tape
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def graph_signature(root: Tensor) -> list[tuple[str, tuple[int, ...]]]:
    """Op kinds and output shapes of the graph below ``root``, in topological order."""
    return [(n._op, n.shape) for n in topo_order(root)]
