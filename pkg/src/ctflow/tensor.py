"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the recorded graph in a fixed
reverse topological order, so repeated runs accumulate in the same order and
give bit-identical gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_CHECKED = False


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise NonFiniteError whenever an op produces NaN or Inf."""
    global _CHECKED
    prev, _CHECKED = _CHECKED, enabled
    try:
        yield
    finally:
        _CHECKED = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite values in tensor")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op=""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data, op=op)
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this tensor."""
        if seed is None:
            if self.size != 1:
                raise ShapeError(f"backward seed must be scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), self.shape).copy()
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- elementwise binary ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), back, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._make(a.data**exponent, (a,), back, "pow")


# -- elementwise unary -------------------------------------------------------
def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions --------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def sq_norm(a: Tensor, axis=None) -> Tensor:
    """Sum of squares over ``axis`` (all axes by default)."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data * a.data, axis=axes)

    def back(g):
        return (2.0 * np.expand_dims(g, axes) * a.data,)

    return Tensor._make(out, (a,), back, "sq_norm")


# -- shape manipulation ------------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._make(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._make(np.array(out), (a,), back, "getitem")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def split_channels(a: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Split along the last axis into ``[..., :at]`` and ``[..., at:]``."""
    return a[..., :at], a[..., at:]


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._make(out, tensors, back, "concat")


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), back, "matmul")


def logabsdet(a: Tensor) -> Tensor:
    """log|det A| of a square matrix; gradient is A^{-T}."""
    a = as_tensor(a)
    sign, value = np.linalg.slogdet(a.data)
    if sign == 0:
        raise np.linalg.LinAlgError("matrix is singular")

    def back(g):
        return (g * np.linalg.inv(a.data).T,)

    return Tensor._make(value, (a,), back, "logabsdet")


def inverse(a: Tensor) -> Tensor:
    a = as_tensor(a)
    inv = np.linalg.inv(a.data)

    def back(g):
        return (-inv.T @ g @ inv.T,)

    return Tensor._make(inv, (a,), back, "inverse")


# -- convolution -------------------------------------------------------------
def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N,D,H,W,C) -> (N*D*H*W, k*k*k*C) patches with zero 'same' padding."""
    p = k // 2
    n, d, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(padded, (k, k, k), axis=(1, 2, 3))  # N,D,H,W,C,k,k,k
    return win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(n * d * h * w, k * k * k * c)


def _conv3d_data(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    n, d, h, wd, _ = x.shape
    cout = w.shape[-1]
    if k == 1:
        return x @ w[0, 0, 0]
    cols = _im2col(x, k)
    return (cols @ w.reshape(-1, cout)).reshape(n, d, h, wd, cout)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 3D convolution with zero 'same' padding.

    ``x`` is (N, D, H, W, Cin), ``weight`` is (k, k, k, Cin, Cout) with odd k.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-axis input and weight, got {x.shape}, {weight.shape}")
    k = weight.shape[0]
    if weight.shape[:3] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"conv3d kernel must be cubic and odd, got {weight.shape[:3]}")
    if x.shape[-1] != weight.shape[3]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[-1]}, weight {weight.shape[3]}")
    cout = weight.shape[-1]
    cols = _im2col(x.data, k) if (k > 1 and weight.requires_grad) else None
    if cols is not None:
        out = (cols @ weight.data.reshape(-1, cout)).reshape(x.shape[:4] + (cout,))
    else:
        out = _conv3d_data(x.data, weight.data)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = weight.data[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
            gx = _conv3d_data(g, np.ascontiguousarray(flipped))
        if weight.requires_grad:
            g2 = g.reshape(-1, cout)
            if k == 1:
                gw = (x.data.reshape(-1, x.shape[-1]).T @ g2).reshape(weight.shape)
            else:
                gw = (cols.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0).reshape(bias.shape)
        return (gx, gw, gb)[: len(parents)]

    return Tensor._make(out, parents, back, "conv3d")


# -- define-then-run front end ------------------------------------------------
class UnboundInputError(KeyError):
    pass


class Graph:
    """A differentiable function of named inputs.

    ``fn`` receives one keyword argument per input name and returns either a
    Tensor (exposed as output ``"out"``) or a mapping of output names to
    Tensors. Evaluation records a fresh tape every call.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]], inputs: Iterable[str]):
        self.fn = fn
        self.inputs = tuple(inputs)
        self.leaves: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] = {}


def forward_eval(graph: Graph, bindings: Mapping[str, object]) -> dict[str, Tensor]:
    missing = [name for name in graph.inputs if name not in bindings]
    if missing:
        raise UnboundInputError(f"unbound graph inputs: {missing}")
    graph.leaves = {name: Tensor(np.array(bindings[name], dtype=np.float64), True) for name in graph.inputs}
    result = graph.fn(**graph.leaves)
    graph.outputs = {"out": result} if isinstance(result, Tensor) else dict(result)
    return graph.outputs


def backward(graph: Graph, seed: str = "out") -> dict[str, np.ndarray]:
    if not graph.outputs:
        raise RuntimeError("forward_eval must run before backward")
    root = graph.outputs[seed]
    if root.size != 1:
        raise ShapeError(f"seed {seed!r} is not scalar (shape {root.shape})")
    for leaf in graph.leaves.values():
        leaf.grad = None
    root.backward()
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in graph.leaves.items()
    }
