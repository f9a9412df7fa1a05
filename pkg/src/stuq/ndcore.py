"""Minimal dense tensors with reverse-mode differentiation.

Only the operations the forecaster needs are provided. Each op computes its
forward value with numpy, checks it is finite, and (when any input tracks
gradients) records a closure that maps the output gradient to input gradients.

Arrays may carry leading batch axes; ``matmul`` broadcasts like ``np.matmul``
and elementwise ops broadcast like numpy, with gradients summed back to the
input shape.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class DomainError(ValueError):
    """An op input lies outside the op's domain (e.g. log of a non-positive)."""


class ShapeError(ValueError):
    pass


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    # a finite sum implies finite entries; only an overflow needs the full scan
    if not np.isfinite(np.sum(arr)) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return mul(self, unary("reciprocal", as_tensor(other)))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain Python numbers adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, name: str) -> Tensor:
    _check_finite(name, data)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------- linear ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def node_contract(z, w) -> Tensor:
    """Per-node weights: ``out[..., n, :] = z[..., n, :] @ w[n]``.

    ``z`` is (B, N, I) or (N, I); ``w`` is (N, I, O).
    """
    z, w = as_tensor(z), as_tensor(w)
    squeeze = z.ndim == 2
    zd = z.data[None] if squeeze else z.data
    if zd.ndim != 3 or w.ndim != 3 or zd.shape[1:] != w.shape[:2]:
        raise ShapeError(f"node_contract shapes incompatible: {z.shape} and {w.shape}")
    out = _kernels.node_contract(zd, w.data)
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        dz, dw = _kernels.node_contract_grad(zd, w.data, gd)
        return (dz[0] if squeeze else dz), dw

    return _make(out, (z, w), backward, "node_contract")


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


# ------------------------------------------------------------ elementwise ops


_sigmoid = _kernels.sigmoid_numpy


def unary(kind: str, x) -> Tensor:
    """Apply an elementwise function.

    ``kind`` is one of sigmoid, tanh, relu, exp, log, square, abs, reciprocal.
    """
    x = as_tensor(x)
    d = x.data
    if kind == "sigmoid":
        out = _sigmoid(d)
        grad = lambda g: (g * out * (1.0 - out),)  # noqa: E731
    elif kind == "tanh":
        out = np.tanh(d)
        grad = lambda g: (g * (1.0 - out * out),)  # noqa: E731
    elif kind == "relu":
        out = np.maximum(d, 0.0)
        grad = lambda g: (g * (d > 0),)  # noqa: E731
    elif kind == "exp":
        with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
            out = np.exp(d)
        grad = lambda g: (g * out,)  # noqa: E731
    elif kind == "log":
        if np.any(d <= 0):
            raise DomainError("log of non-positive entry")
        out = np.log(d)
        grad = lambda g: (g / d,)  # noqa: E731
    elif kind == "square":
        out = d * d
        grad = lambda g: (2.0 * g * d,)  # noqa: E731
    elif kind == "abs":
        out = np.abs(d)
        grad = lambda g: (g * np.sign(d),)  # noqa: E731
    elif kind == "reciprocal":
        if np.any(d == 0):
            raise DomainError("reciprocal of zero")
        out = 1.0 / d
        grad = lambda g: (-g * out * out,)  # noqa: E731
    else:
        raise ValueError(f"unknown unary op {kind!r}")
    return _make(out, (x,), grad, kind)


_ACT_KINDS = {"sigmoid": 0, "tanh": 1}


def masked_activation(x, mask: DropoutMask | None, kind: str) -> Tensor:
    """Fused ``act(x * mask)`` for act in {sigmoid, tanh}; the mask is constant."""
    x = as_tensor(x)
    k = _ACT_KINDS[kind]
    m = None if mask is None else mask.values
    if m is not None and m.shape != x.shape:
        raise ShapeError(f"mask {m.shape} does not match input {x.shape}")
    out = _kernels.masked_act(x.data, m, k)
    return _make(out, (x,), lambda g: (_kernels.masked_act_grad(out, m, g, k),), kind)


def gated_update(z, h, c) -> Tensor:
    """Fused ``z * h + (1 - z) * c`` (all operands broadcast to one shape)."""
    z, h, c = as_tensor(z), as_tensor(h), as_tensor(c)
    out = _kernels.gated_update(z.data, h.data, c.data)

    def backward(g):
        dz, dh, dc = _kernels.gated_update_grad(z.data, h.data, c.data, g)
        return _unbroadcast(dz, z.shape), _unbroadcast(dh, h.shape), _unbroadcast(dc, c.shape)

    return _make(out, (z, h, c), backward, "gated_update")


def sigmoid(x) -> Tensor:
    return unary("sigmoid", x)


def tanh(x) -> Tensor:
    return unary("tanh", x)


def relu(x) -> Tensor:
    return unary("relu", x)


def exp(x) -> Tensor:
    return unary("exp", x)


def log(x) -> Tensor:
    return unary("log", x)


def square(x) -> Tensor:
    return unary("square", x)


def absolute(x) -> Tensor:
    return unary("abs", x)


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,), "clip")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(out, (a, b), backward, "maximum")


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax_rows")


# ------------------------------------------------------------- structural ops


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, backward, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def take(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "take")


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def reduce_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return reduce_sum(x, axis) * (1.0 / count)


# ------------------------------------------------------------------- dropout


@dataclass(frozen=True)
class DropoutMask:
    """Inverted-dropout mask: entries are 0 or 1/keep_prob."""

    values: np.ndarray
    keep_prob: float

    @classmethod
    def sample(cls, shape, keep_prob: float, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> DropoutMask:
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
        if keep_prob == 1.0:
            return cls(np.ones(shape, dtype=dtype), 1.0)
        keep = rng.random(shape) < keep_prob
        return cls(keep.astype(dtype) / keep_prob, keep_prob)

    @classmethod
    def ones(cls, shape, dtype=DEFAULT_DTYPE) -> DropoutMask:
        return cls(np.ones(shape, dtype=dtype), 1.0)


def apply_dropout(x, mask: DropoutMask) -> Tensor:
    """Multiply by a constant mask (no gradient flows into the mask)."""
    x = as_tensor(x)
    try:
        out = x.data * mask.values
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    if out.shape != x.shape:
        raise ShapeError(f"mask {mask.values.shape} broadcasts beyond input {x.shape}")
    return _make(out, (x,), lambda g: (g * mask.values,), "dropout")


# ------------------------------------------------------------------ backward


class GradTape:
    """Reverse topological order of the graph that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; post-order gives a topological order
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes.reverse()

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar; returns ``{id(leaf): grad}``.

    Leaf ``.grad`` fields are overwritten (not accumulated across calls).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = GradTape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in tape.nodes:
        if node._backward is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
        out[id(leaf)] = leaf.grad
    return out


def parameters_state(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    scale_floor: float = 1e-3,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` rebuilds the scalar from ``params`` each call. Per coordinate the
    error is ``|a - n| / max(|a|, |n|, scale_floor * max|a|, 1e-300)``, so
    coordinates far below the gradient's overall scale are judged against
    that scale rather than against their own (noise-dominated) magnitude.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    gmax = max((float(np.max(np.abs(a))) for a in analytic if a.size), default=0.0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
        af = a.reshape(-1)
        denom = np.maximum.reduce([np.abs(af), np.abs(num), np.full(af.shape, scale_floor * gmax), np.full(af.shape, 1e-300)])
        err = np.abs(af - num) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
