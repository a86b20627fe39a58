"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to parent gradients.  :func:`backward` walks the
graph in reverse topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

_GRAD_ENABLED = True
CHECK_FINITE = True

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached an op."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite values")


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check(op: str, arr: np.ndarray) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(op)


class Tensor:
    """A float64 array with an optional gradient slot.

    ``parents`` and ``backward_fn`` are populated only for op outputs created
    while gradients are enabled and some input requires grad.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        _check(op, data)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        else:
            out.parents = ()
            out.backward_fn = None
        return out

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, "detach", (), None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._result(a.data + b.data, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._result(a.data * b.data, "mul", (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(a.data / b.data, "div", (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        return (g * c,)

    return Tensor._result(a.data * c, "scale", (a,), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return Tensor._result(out, "exp", (a,), back)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log")

    def back(g):
        return (g / a.data,)

    return Tensor._result(np.log(a.data), "log", (a,), back)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = ndtr(x)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._result(x * cdf, "gelu", (a,), back)


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product following numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    flat = ad.ndim > 2 and bd.ndim == 2
    try:
        if flat:
            if ad.shape[-1] != bd.shape[0]:
                raise ValueError
            out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
        else:
            out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = gb = None
        if flat:
            # (..., k) @ (k, n): fold the batch axes into rows
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if ad.ndim == 1 and bd.ndim == 1:
            return (g * bd if a.requires_grad else None), (g * ad if b.requires_grad else None)
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if ad.ndim == 1:
                ga = ga[..., 0, :]
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            gb = np.swapaxes(a2, -1, -2) @ g2
            if bd.ndim == 1:
                gb = gb[..., 0]
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return Tensor._result(out, "matmul", (a, b), back)


# -- shape manipulation ---------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def back(g):
        return (g.reshape(a.shape),)

    return Tensor._result(out, "reshape", (a,), back)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def back(g):
        return (np.swapaxes(g, ax1, ax2),)

    return Tensor._result(np.swapaxes(a.data, ax1, ax2), "swapaxes", (a,), back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inverse),)

    return Tensor._result(np.transpose(a.data, axes), "transpose", (a,), back)


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.array(out)

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, "getitem", (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat")
    ax = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))]

    return Tensor._result(out, "concat", tensors, back)


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None

    def back(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor._result(out, "broadcast_to", (a,), back)


# -- reductions -----------------------------------------------------------
def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        return (_expand(g, a.shape, axis, keepdims).copy(),)

    return Tensor._result(out, "sum", (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size // max(out.size, 1)

    def back(g):
        return (_expand(g, a.shape, axis, keepdims) / n,)

    return Tensor._result(out, "mean", (a,), back)


# -- normalisation and probability ---------------------------------------
def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, "softmax", (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, "log_softmax", (a,), back)


def layer_norm(a: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then scale and shift."""
    d = a.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", a.shape, weight.shape, bias.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def back(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        gx = g * weight.data
        gin = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gin, gw, gb

    return Tensor._result(xhat * weight.data + bias.data, "layer_norm", (a, weight, bias), back)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each last-axis vector by its Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if (norm < eps).any():
        raise NonFiniteError("l2_normalize")
    y = a.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return Tensor._result(y, "l2_normalize", (a,), back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity between rows of ``a`` (..., n, d) and ``b`` (..., k, d)."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    return matmul(l2_normalize(a), swapaxes(l2_normalize(b), -1, -2))


# -- graph traversal ------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss has no recorded graph (run a forward pass with a trainable input)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
