"""Dense float64 tensors with a define-by-run reverse-mode autodiff tape.

Every op returns a new :class:`Tensor` holding its forward value plus a
closure that maps the upstream gradient to one gradient per parent. The
graph is rebuilt on every forward pass; nothing is cached between passes.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "conv2d",
    "relu",
    "logsumexp",
    "gather",
    "reshape",
    "tsum",
    "mean",
    "power",
    "log",
    "exp",
    "backward",
    "grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


def _shape_error(op: str, *shapes: tuple[int, ...], detail: str = "") -> ShapeError:
    msg = f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes)
    if detail:
        msg += f" ({detail})"
    return ShapeError(msg)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor data must be finite (found NaN or Inf)")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def _bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), _bw, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar without recording it as a graph input."""
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape, detail="expected (n,k) @ (k,m)")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) with zero padding.

    ``x`` is NHWC, ``w`` is (kh, kw, C_in, C_out); output is NH'W'C_out.
    """
    x, w = constant(x), constant(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise _shape_error("conv2d", x.shape, w.shape, detail="expected NHWC input and (kh,kw,Cin,Cout) kernel")
    kh, kw = w.shape[:2]
    n, h, wid, c = x.shape
    p = int(padding)
    ho, wo = h + 2 * p - kh + 1, wid + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise _shape_error("conv2d", x.shape, w.shape, detail=f"kernel larger than padded input (padding={p})")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    # windows: (n, ho, wo, c, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    wd = w.data
    out = np.einsum("nhwcij,ijcf->nhwf", windows, wd, optimize=True)

    def _bw(g):
        gw = np.einsum("nhwcij,nhwf->ijcf", windows, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho, j:j + wo, :] += g @ wd[i, j].T
        gx = gxp[:, p:p + h, p:p + wid, :] if p else gxp
        return gx, gw

    return Tensor._result(out, (x, w), _bw, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def logsumexp(x: Tensor) -> Tensor:
    """Log-sum-exp over the last axis, shifted by the row max."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    softmax = e / s
    return Tensor._result(out, (x,), lambda g: (g[..., None] * softmax,), "logsumexp")


def gather(x: Tensor, index) -> Tensor:
    """Pick ``x[i, index[i]]`` for every row of a 2-D tensor."""
    idx = np.asarray(index)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise _shape_error("gather", x.shape, idx.shape, detail="expected (n,k) values and (n,) indices")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"gather: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def _bw(g):
        gx = np.zeros(shape)
        gx[rows, idx] = g
        return (gx,)

    return Tensor._result(x.data[rows, idx], (x,), _bw, "gather")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, tuple(shape)) from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return Tensor._result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    out = x.data.sum(axis=axis)
    return Tensor._result(
        out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum"
    )


def mean(x: Tensor) -> Tensor:
    n = x.size
    if n == 0:
        raise _shape_error("mean", x.shape, detail="empty tensor")
    shape = x.shape
    return Tensor._result(
        np.asarray(x.data.sum() / n), (x,), lambda g: (np.full(shape, g / n),), "mean"
    )


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    xd = x.data
    out = xd ** p

    def _bw(g):
        if p == 0.0:
            return (np.zeros_like(xd),)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = p * xd ** (p - 1.0)
        # a zero upstream gradient contributes nothing, even where the local slope is infinite
        return (np.where(g == 0, 0.0, g * local),)

    return Tensor._result(out, (x,), _bw, "power")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _propagate(root: Tensor) -> dict[int, np.ndarray]:
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse mode from a scalar root.

    Sets ``.grad`` on every reachable leaf that requires grad (overwriting any
    previous value) and returns the same gradients keyed by leaf.
    """
    grads = _propagate(root)
    out: dict[Tensor, np.ndarray] = {}
    for node in _topological_order(root):
        if node._backward is None and node.requires_grad:
            g = grads.get(id(node))
            node.grad = np.zeros_like(node.data) if g is None else np.asarray(g, dtype=np.float64).reshape(node.shape)
            out[node] = node.grad
    return out


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``root`` with respect to ``wrt``; zeros where unreachable."""
    wrt = list(wrt)
    grads = _propagate(root)
    result = []
    for t in wrt:
        g = grads.get(id(t))
        result.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape))
    return result
