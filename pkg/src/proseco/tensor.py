"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations on tensors that require grad
record their parents and a backward closure; :meth:`Tensor.backward` walks
that graph in reverse topological order and accumulates gradients into the
leaves.

Values are 32-bit by default. The verification oracle (:func:`grad_check`)
re-evaluates functions under ``precision(np.float64)`` so finite differences
are not drowned in single-precision rounding.
"""

from __future__ import annotations

import contextlib
import contextvars
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateError, OracleError

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("proseco_dtype", default=np.float32)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("proseco_grad", default=True)

CHECK_FINITE = bool(os.environ.get("PROSECO_DEBUG"))


@contextlib.contextmanager
def precision(dtype):
    """Run every op inside the block at ``dtype`` (float32 or float64)."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; results never require grad."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _arr(x) -> np.ndarray:
    dt = _DTYPE.get()
    data = x.data if isinstance(x, Tensor) else x
    if isinstance(data, np.ndarray) and data.dtype == dt:
        return data
    return np.asarray(data, dtype=dt)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = _arr(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values produced by op {_op or 'leaf'!r}")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not on the differentiation tape")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _raise_scalar(shape):
    raise ContractError(f"item() on non-scalar tensor of shape {shape}")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
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


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return an iterable of ``(parent, grad)`` pairs. This
    is also the extension point for custom ops.
    """
    track = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), _op=name)
    if track:
        out._backward = backward
    return out


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    x, y = _arr(a), _arr(b)
    return make_op(
        x + y,
        (a, b),
        lambda g: ((a, _unbroadcast(g, x.shape)), (b, _unbroadcast(g, y.shape))),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-_arr(a), (a,), lambda g: ((a, -g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    x, y = _arr(a), _arr(b)
    return make_op(
        x * y,
        (a, b),
        lambda g: ((a, _unbroadcast(g * y, x.shape)), (b, _unbroadcast(g * x, y.shape))),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    x, y = _arr(a), _arr(b)
    out = x / y
    return make_op(
        out,
        (a, b),
        lambda g: ((a, _unbroadcast(g / y, x.shape)), (b, _unbroadcast(-g * out / y, y.shape))),
        "div",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = _DTYPE.get()(c)
    return make_op(_arr(a) * c, (a,), lambda g: ((a, g * c),), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(_arr(a))
    return make_op(out, (a,), lambda g: ((a, g * out),), "exp")


def log(a: Tensor) -> Tensor:
    x = _arr(a)
    return make_op(np.log(x), (a,), lambda g: ((a, g / x),), "log")


def abs_(a: Tensor) -> Tensor:
    x = _arr(a)
    return make_op(np.abs(x), (a,), lambda g: ((a, g * np.sign(x)),), "abs")


def relu(a: Tensor) -> Tensor:
    x = _arr(a)
    pos = x > 0
    return make_op(np.where(pos, x, 0).astype(x.dtype), (a,), lambda g: ((a, g * pos),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = _arr(a)
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    e = np.exp(x[~p])
    out[~p] = e / (1.0 + e)
    return make_op(out, (a,), lambda g: ((a, g * out * (1 - out)),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(_arr(a))
    return make_op(out, (a,), lambda g: ((a, g * (1 - out * out)),), "tanh")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    x, y = _arr(a), _arr(b)
    pick = x >= y
    return make_op(
        np.where(pick, x, y),
        (a, b),
        lambda g: ((a, _unbroadcast(g * pick, x.shape)), (b, _unbroadcast(g * ~pick, y.shape))),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    x, y = _arr(a), _arr(b)
    pick = x <= y
    return make_op(
        np.where(pick, x, y),
        (a, b),
        lambda g: ((a, _unbroadcast(g * pick, x.shape)), (b, _unbroadcast(g * ~pick, y.shape))),
        "minimum",
    )


def clamp_min(a: Tensor, lo: float) -> Tensor:
    x = _arr(a)
    keep = x >= lo
    return make_op(np.where(keep, x, lo).astype(x.dtype), (a,), lambda g: ((a, g * keep),), "clamp_min")


# -- linear algebra and shape -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over one leading axis."""
    x, y = _arr(a), _arr(b)
    if x.ndim not in (2, 3) or y.ndim not in (2, 3) or x.shape[-1] != y.shape[-2]:
        raise ContractError(f"matmul dimension mismatch: {x.shape} @ {y.shape}")
    if x.ndim == 3 and y.ndim == 3 and x.shape[0] != y.shape[0]:
        raise ContractError(f"matmul batch mismatch: {x.shape} @ {y.shape}")

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        if ga.ndim > x.ndim:
            ga = ga.sum(axis=0)
        if gb.ndim > y.ndim:
            gb = gb.sum(axis=0)
        return ((a, ga), (b, gb))

    return make_op(x @ y, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    x = _arr(a)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(x, axes), (a,), lambda g: ((a, np.transpose(g, inverse)),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    x = _arr(a)
    return make_op(x.reshape(shape), (a,), lambda g: ((a, g.reshape(x.shape)),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    x = _arr(a)

    def backward(g):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return ((a, full),)

    return make_op(x[index], (a,), backward, "getitem")


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select slices of ``a`` along ``axis``; repeated indices accumulate grads."""
    x = _arr(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return ((a, full),)

    return make_op(np.take(x, idx, axis=axis), (a,), backward, "gather")


def scatter_add(src: Tensor, indices, size: int, axis: int = 0) -> Tensor:
    """Inverse of :func:`gather`: sum slices of ``src`` into ``size`` slots."""
    x = _arr(src)
    idx = np.asarray(indices, dtype=np.intp)
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=x.dtype)
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(x, axis, 0))
    return make_op(out, (src,), lambda g: ((src, np.take(g, idx, axis=axis)),), "scatter_add")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    arrays = [_arr(t) for t in tensors]
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def backward(g):
        return zip(tensors, np.split(g, bounds, axis=axis))

    return make_op(np.concatenate(arrays, axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions ----------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _arr(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, x.shape).copy()),)

    return make_op(np.asarray(x.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _arr(a)
    count = x.size if axis is None else np.prod([x.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- normalisations -------------------------------------------------------------


def masked_softmax_rows(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the entries where ``mask`` is True.

    Masked entries come out exactly zero. The row maximum is taken over
    unmasked entries only.
    """
    x = _arr(logits)
    if x.ndim != 2:
        raise ContractError(f"masked_softmax_rows expects a matrix, got shape {x.shape}")
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ContractError(f"mask shape {mask.shape} != logits shape {x.shape}")
        dead = ~mask.any(axis=1)
        if dead.any():
            raise DegenerateError(f"rows {np.flatnonzero(dead).tolist()} are fully masked")
        row_max = np.where(mask, x, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x - row_max, 0)), 0).astype(x.dtype)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return ((logits, out * (g - (g * out).sum(axis=1, keepdims=True))),)

    return make_op(out, (logits,), backward, "masked_softmax")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x = _arr(a)
    norm = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), eps)
    out = x / norm

    def backward(g):
        return ((a, (g - out * (g * out).sum(axis=-1, keepdims=True)) / norm),)

    return make_op(out, (a,), backward, "l2_normalize")


# -- verification oracle --------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-3,
    atol: float = 1e-3,
    coords: Iterable[int] | None = None,
) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max |analytic - numeric| / (|numeric| + atol)`` over the checked
    coordinates. The analytic gradient comes from the normal 32-bit path; the
    finite differences are evaluated in 64-bit.

    Raises OracleError if ``f`` is not deterministic.
    """
    x0 = np.array(x.data, dtype=np.float32)
    leaf = Tensor(x0.copy(), requires_grad=True)
    loss = f(leaf)
    again = f(Tensor(x0.copy())).data
    if not np.array_equal(loss.data, again):
        raise OracleError("function is not deterministic across two evaluations")
    loss.backward()
    analytic = np.zeros(x0.size) if leaf.grad is None else leaf.grad.astype(np.float64).reshape(-1)

    base = x0.astype(np.float64)
    flat = base.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    with precision(np.float64), no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f(Tensor(base)).data)
            flat[i] = orig - step
            down = float(f(Tensor(base)).data)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, abs(analytic[i] - numeric) / (abs(numeric) + atol))
    return worst
