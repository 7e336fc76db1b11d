"""Minimal dense-tensor autograd engine.

A ``Tensor`` wraps a row-major numpy array. Differentiable operations
record their parents and a backward closure on the output; calling
``backward()`` on a scalar root walks the recorded graph once in reverse
topological order and accumulates gradients additively on every tensor
that requires them. Only the operation set the denoiser needs is
provided; anything fancier is out of scope on purpose.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

_FLOAT_KINDS = ("f",)


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind not in _FLOAT_KINDS:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    ``data`` is immutable by convention once the tensor is part of a
    graph; ``grad`` is the only buffer mutated afterwards (filled during
    ``backward``). Optimizers may rewrite ``data`` of leaf parameters
    between graph builds.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A view of the same data cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- graph machinery ----------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar root.

        Gradients accumulate additively across fan-out; visiting order is
        the reverse of a deterministic depth-first topological order, so
        repeated runs over an identical graph are bit-identical.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar root, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return tabs(self)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def accumulate(t: Tensor, g: np.ndarray):
    """Add a gradient contribution onto ``t`` (no-op unless tracked)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    data = a.data + b.data

    def backward(g):
        accumulate(a, unbroadcast(g, a.shape))
        accumulate(b, unbroadcast(g, b.shape))

    return _result(data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    data = a.data * b.data

    def backward(g):
        accumulate(a, unbroadcast(g * b.data, a.shape))
        accumulate(b, unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward, "mul")


def tabs(x: Tensor) -> Tensor:
    data = np.abs(x.data)
    sign = np.sign(x.data)  # subgradient 0 at the kink

    def backward(g):
        accumulate(x, g * sign)

    return _result(data, (x,), backward, "abs")


# -- reductions ----------------------------------------------------------------


def _restore_axes(g, axis, keepdims, shape):
    if axis is None or keepdims:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    expanded = list(g.shape)
    for a in sorted(axes):
        expanded.insert(a, 1)
    return np.broadcast_to(g.reshape(expanded), shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        accumulate(x, _restore_axes(np.asarray(g), axis, keepdims, x.shape))

    return _result(np.asarray(data), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a % x.ndim] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        accumulate(
            x, _restore_axes(np.asarray(g), axis, keepdims, x.shape) / count
        )

    return _result(np.asarray(data), (x,), backward, "mean")


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape[-1]} (last axis of "
            f"left operand) vs {b.shape[-2]} (second-to-last axis of right)"
        )
    data = a.data @ b.data

    def backward(g):
        accumulate(a, unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        accumulate(b, unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(data, (a, b), backward, "matmul")


# -- shape manipulation ---------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    orig = x.shape

    def backward(g):
        accumulate(x, g.reshape(orig))

    return _result(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        accumulate(x, np.transpose(g, inverse))

    return _result(data, (x,), backward, "transpose")


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing with gradient scatter on the backward pass."""
    data = x.data[key]

    def backward(g):
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.data)
        buf[key] = g
        accumulate(x, buf)

    return _result(np.array(data, copy=True), (x,), backward, "getitem")


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(g):
        start = 0
        for t, n in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            accumulate(t, g[tuple(sl)])
            start += n

    return _result(data, ts, backward, "concat")


def roll(x: Tensor, shift, axis) -> Tensor:
    """Cyclic translation; the backward pass rolls the gradient back."""
    data = np.roll(x.data, shift, axis=axis)
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift

    def backward(g):
        accumulate(x, np.roll(g, neg, axis=axis))

    return _result(data, (x,), backward, "roll")


def roll_batch(x: Tensor, shifts: Sequence[tuple[int, int]]) -> Tensor:
    """Per-sample cyclic translation of an NCHW tensor over (H, W)."""
    if x.ndim != 4:
        raise ShapeError(f"roll_batch expects NCHW input, got shape {x.shape}")
    if len(shifts) != x.shape[0]:
        raise ShapeError(
            f"got {len(shifts)} shifts for batch of {x.shape[0]} (axis 0)"
        )
    data = np.stack(
        [np.roll(x.data[i], shifts[i], axis=(1, 2)) for i in range(x.shape[0])]
    )

    def backward(g):
        accumulate(
            x,
            np.stack(
                [
                    np.roll(g[i], (-shifts[i][0], -shifts[i][1]), axis=(1, 2))
                    for i in range(g.shape[0])
                ]
            ),
        )

    return _result(data, (x,), backward, "roll_batch")


def scan_nonfinite(root: Tensor):
    """Return (op, kind) of the first graph node holding non-finite values."""
    stack, seen = [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not np.all(np.isfinite(node.data)):
            return node.op, "data"
        if node.grad is not None and not np.all(np.isfinite(node.grad)):
            return node.op, "grad"
        stack.extend(node._parents)
    return None
