"""Small dense tensor engine with reverse-mode differentiation.

Only the operations the descriptor network needs are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure that
maps the output gradient to parent gradients. :func:`backward` walks the
recorded graph once in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPES = {"32": np.float32, "64": np.float64}

# Raise on NaN/Inf as soon as an op produces one.
CHECK_FINITE = True

# Distances at or below this value get a zero gradient.
DIST_EPS = 1e-8


class ShapeError(ValueError):
    pass


class PrecisionError(TypeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def resolve_dtype(precision) -> np.dtype:
    """Map ``"32"``/``"64"``/``32``/``64``/numpy dtype to a float dtype."""
    if isinstance(precision, (int, str)) and str(precision) in DTYPES:
        return np.dtype(DTYPES[str(precision)])
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise PrecisionError(f"unsupported precision {precision!r}")
    return dt


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float64
        self.data = np.asarray(data, dtype=resolve_dtype(dtype))
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, alpha: float) -> "Tensor":
        return scale(self, alpha)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    dtypes = {p.dtype for p in parents}
    if len(dtypes) > 1:
        raise PrecisionError(f"{op}: mixed precisions {sorted(str(d) for d in dtypes)}")
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents
    out._backward = backward_fn
    out.op = op
    return out


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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients live only for the duration of the call, so
    calling twice on one graph doubles the leaf gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
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
            grads[key] = pg if key not in grads else grads[key] + pg


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _make(a.data * a.dtype.type(alpha), (a,), lambda g: (g * a.dtype.type(alpha),), "scale")


def tensor_sum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw, "sum")


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bw, "mean")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation over NCHW input with per-filter bias.

    Implemented as im2col + one matrix product in channels-last layout;
    patch columns are ordered (kernel row, kernel col, channel).
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    if padding < 0:
        raise ShapeError("conv2d: padding must be non-negative")
    k, p = kh, padding
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be {ho}x{wo}")
    dt = x.dtype
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dt)
    xp[:, p:p + h, p:p + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c), dtype=dt)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(k * k * c, f)
    out = cols @ wmat
    out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gw = (cols.T @ gl).reshape(k, k, c, f).transpose(3, 2, 0, 1)
        gb = gl.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = (gl @ wmat.T).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
        return gx, np.ascontiguousarray(gw), gb

    return _make(out, (x, kernel, bias), bw, "conv2d")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties go to the first element in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial size {h}x{w} is not even")
    # window elements in row-major order
    corners = [x.data[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def bw(g):
        gx = np.zeros_like(x.data)
        free = np.ones(out.shape, dtype=bool)
        for (i, j), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = free & (corner == out)
            gx[:, :, i::2, j::2] = np.where(hit, g, 0)
            free &= ~hit
        return (gx,)

    return _make(out, (x,), bw, "max_pool2")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(0))
    return _make(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape N x D_in."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"affine: expected 2-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input dim {x.shape[1]} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias shape {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), bw, "affine")


def concat_channels(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    parts = (a, b, c)
    for t in parts:
        if t.data.ndim != 4:
            raise ShapeError(f"concat_channels: expected 4-d tensors, got {t.shape}")
    ref = (a.shape[0],) + a.shape[2:]
    for t in parts[1:]:
        if (t.shape[0],) + t.shape[2:] != ref:
            raise ShapeError(f"concat_channels: {a.shape} vs {t.shape}")
    out = np.concatenate([t.data for t in parts], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in parts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(3))

    return _make(out, parts, bw, "concat_channels")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; the backward pass scatter-adds repeated rows."""
    idx = np.asarray(index, dtype=np.intp)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), bw, "take_rows")


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise L2 distance. Gradient is zero where the distance is <= DIST_EPS."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"euclidean_distance: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def bw(g):
        safe = dist > DIST_EPS
        coef = np.where(safe, g / np.where(safe, dist, 1), 0).astype(a.dtype)
        ga = diff * coef[:, None]
        return ga, -ga

    return _make(dist, (a, b), bw, "euclidean_distance")
