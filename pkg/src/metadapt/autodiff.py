"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every differentiable quantity in the package (images in a batch, encoder
weights, embeddings, losses) is a :class:`Tensor`. Operations build a DAG
implicitly; :func:`backward` walks it in reverse topological order and
returns gradients keyed by leaf name.

Numerical primitives: add, multiply, matmul, conv2d, relu, exp, log, mean,
sum, softmax, dot, l2_norm. Structural helpers (reshape, take_rows, concat,
transpose) only move entries around and carry identity-like gradients.
"""

from __future__ import annotations

from collections.abc import Mapping
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ContractViolation(ValueError):
    """Raised when an operation is called outside its preconditions."""


class DegenerateEmbeddingError(ValueError):
    """Raised when a vector with zero norm reaches a normalization."""


class Tensor:
    """Immutable float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "parents", "backward_fn", "name", "requires_grad")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
        requires_grad: bool | None = None,
    ):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.size == 0:
            raise ContractViolation("tensors must have at least one entry")
        if not np.isfinite(arr).all():
            raise ContractViolation("tensor data contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        if requires_grad is None:
            requires_grad = name is not None or any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single entry, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, multiply(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), multiply(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Detached copy: same values, no path back to the graph."""
    return Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=False)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64, order="C")
    if not np.isfinite(data).all():
        raise ContractViolation("operation produced NaN or Inf")
    data.setflags(write=False)
    out.data = data
    out.parents = tuple(parents)
    out.backward_fn = fn
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ContractViolation(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "multiply")

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), fn)


def matmul(a, b) -> Tensor:
    """2-D matrix product ``(m, k) @ (k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), fn)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    # channels-last padded copy; the window view then reshapes to (n*oh*ow, c*k*k) with one copy
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad : pad + h, pad : pad + w] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    return win.reshape(n * oh * ow, c * k * k), oh, ow


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x (N, C, H, W)`` with ``weight (O, C, k, k)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ContractViolation("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c or k != k2:
        raise ContractViolation(f"conv2d: weight {weight.shape} does not fit input {x.shape}")
    if stride < 1 or padding < 0 or h + 2 * padding < k or w + 2 * padding < k:
        raise ContractViolation("conv2d: invalid stride/padding for input size")
    cols, oh, ow = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (gm @ wmat).reshape(n, oh, ow, c, k, k)
        gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[..., i, j]
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        return gx.transpose(0, 3, 1, 2), gw

    return _node(out, (x, weight), fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def fn(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), fn)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def fn(g):
        return (g * out,)

    return _node(out, (x,), fn)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ContractViolation("log of a non-positive value")

    def fn(g):
        return (g / x.data,)

    return _node(np.log(x.data), (x,), fn)


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _node(out, (x,), fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), fn)


def dot(a, b) -> Tensor:
    """Inner product of two vectors (or row-wise for matching 2-D inputs)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim not in (1, 2):
        raise ContractViolation(f"dot: shapes {a.shape} and {b.shape} must match")

    def fn(g):
        g = np.asarray(g)[..., None]
        return g * b.data, g * a.data

    return _node((a.data * b.data).sum(axis=-1), (a, b), fn)


def l2_norm(x) -> Tensor:
    """Euclidean norm over the last axis."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=-1))
    if np.any(out == 0):
        raise DegenerateEmbeddingError("zero-norm vector")

    def fn(g):
        return (np.asarray(g)[..., None] * x.data / out[..., None],)

    return _node(out, (x,), fn)


# ---------------------------------------------------------------- structural


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def fn(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), fn)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ContractViolation("transpose expects a matrix")

    def fn(g):
        return (g.T,)

    return _node(x.data.T, (x,), fn)


def take_rows(x, index) -> Tensor:
    """Select entries along axis 0 (an int index drops the axis)."""
    x = as_tensor(x)
    out = x.data[index]

    def fn(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _node(out, (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, fn)


def stack(xs: Sequence[Tensor]) -> Tensor:
    return concat([reshape(x, (1,) + as_tensor(x).shape) for x in xs], axis=0)


# ---------------------------------------------------------------- composites


def divide(a, b) -> Tensor:
    """``a / b`` for positive ``b``, expressed as ``a * exp(-log b)``."""
    return multiply(a, exp(multiply(log(b), -1.0)))


def cosine_similarity(a, b) -> Tensor:
    """``a.b / (|a| |b|)`` for two vectors of equal length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ContractViolation(f"cosine_similarity: need equal-length vectors, got {a.shape}, {b.shape}")
    return divide(dot(a, b), multiply(l2_norm(a), l2_norm(b)))


def normalize_rows(x) -> Tensor:
    """Scale every row of a matrix to unit Euclidean norm."""
    x = as_tensor(x)
    inv = exp(multiply(log(l2_norm(x)), -1.0))
    return multiply(x, reshape(inv, (x.shape[0], 1)))


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stabilized ``log(sum(exp(x)))``; the shift is a constant so gradients are exact."""
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    s = sum(exp(add(x, -shift)), axis=axis, keepdims=True)
    out = add(log(s), shift)
    return out if keepdims else reshape(out, np.squeeze(shift, axis=axis).shape)


def log_softmax(x, axis: int = -1) -> Tensor:
    return add(x, multiply(logsumexp(x, axis=axis, keepdims=True), -1.0))


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, leaves: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``root`` with respect to named leaves.

    ``leaves`` fixes the output keys; leaves that do not feed ``root`` get a
    zero gradient. When omitted, every named leaf reachable from ``root`` is
    reported. A leaf feeding several nodes accumulates by summation.
    """
    if root.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    order = _topological(root) if root.requires_grad else [root]
    found: dict[str, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.name is not None:
            found.setdefault(node.name, node)
            if g is not None:
                grads[id(node)] = g
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)

    if leaves is None:
        targets = found
    elif isinstance(leaves, Mapping):
        targets = dict(leaves)
    else:
        targets = {leaf.name: leaf for leaf in leaves}
    out = {}
    for name, leaf in targets.items():
        g = grads.get(id(leaf))
        out[name] = np.zeros(leaf.shape) if g is None else np.array(g)
    return out


# ---------------------------------------------------------------- parameters


class ParameterSet(Mapping):
    """Named, shape-frozen collection of parameter arrays.

    Values are stored as read-only float64 arrays. :meth:`leaves` wraps them
    in fresh named tensors for one forward/backward pass.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in arrays.items():
            arr = np.array(value, dtype=np.float64, copy=True)
            if not np.all(np.isfinite(arr)):
                raise ContractViolation(f"parameter {name!r} is not finite")
            arr.setflags(write=False)
            self._arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self._arrays.items()}

    def replace(self, **updates: np.ndarray) -> "ParameterSet":
        merged = dict(self._arrays)
        for k, v in updates.items():
            if k in merged and np.shape(v) != merged[k].shape:
                raise ContractViolation(f"shape of {k!r} is fixed at {merged[k].shape}")
            merged[k] = v
        return ParameterSet(merged)

    def equals(self, other: "ParameterSet") -> bool:
        """Bitwise equality of names, shapes, and values."""
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )


def sgd_step(params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float) -> ParameterSet:
    """Return ``p - lr * g`` for every parameter; inputs are left untouched."""
    if not lr >= 0:
        raise ContractViolation(f"learning rate must be non-negative, got {lr}")
    unknown = set(grads) - set(params)
    if unknown:
        raise ContractViolation(f"gradients for unknown parameters: {sorted(unknown)}")
    out = {}
    for name, value in params.items():
        if name not in grads or lr == 0:
            out[name] = value
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {value.shape} for {name!r}")
        out[name] = value - lr * g
    return ParameterSet(out)
