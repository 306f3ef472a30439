"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is deliberately small: immutable :class:`Tensor` values, a
:class:`DiffNode` graph built while tracing is enabled, and a
:class:`CustomGradOp` hook for operations whose backward rule is derived
by hand (smoothing, warping, the measurement-inversion block). Gradients
are accumulated additively in a canonical reverse-creation order, so
repeated runs over the same graph are bit-identical.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: shapes {self.shape_a} and {self.shape_b} do not conform")


class NonFiniteError(ValueError):
    pass


class NonScalarRootError(ValueError):
    pass


class Tensor:
    """Immutable dense float64 array value (row-major, contiguous)."""

    __slots__ = ("data",)

    def __init__(self, data, checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor of shape {arr.shape} has non-finite entries")
        self.data = arr

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


_node_ids = itertools.count()

_tracing = True


def tracing_enabled() -> bool:
    return _tracing


@contextmanager
def no_grad():
    """Disable DiffNode recording; forward values are unaffected."""
    global _tracing
    saved = _tracing
    _tracing = False
    try:
        yield
    finally:
        _tracing = saved


class DiffNode:
    """One value in the reverse-mode graph.

    ``parents`` pairs each upstream node with the identifier of the
    backward rule that produces its gradient contribution. ``grad`` is
    populated by :func:`backward` and always matches ``value``'s shape.
    """

    __slots__ = ("value", "parents", "grad", "_vjp", "_id")

    def __init__(self, value: Tensor, parents=(), vjp=None):
        self.value = value
        self.parents = tuple(parents)  # tuple of (DiffNode, rule identifier)
        self.grad: Tensor | None = None
        self._vjp = vjp  # upstream grad array -> tuple of arrays, one per parent
        self._id = next(_node_ids)

    @staticmethod
    def leaf(value) -> "DiffNode":
        if not isinstance(value, Tensor):
            value = Tensor(value)
        return DiffNode(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"DiffNode(shape={self.value.shape}, parents={len(self.parents)})"

    # Arithmetic sugar; the op functions below do the real work.
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


ArrayLike = "DiffNode | Tensor | np.ndarray | float"


def value_of(x) -> np.ndarray:
    """The plain float64 array behind a DiffNode, Tensor, ndarray or scalar."""
    if isinstance(x, DiffNode):
        return x.value.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _should_trace(args) -> bool:
    return _tracing and any(isinstance(a, DiffNode) for a in args)


def _finish(op_name: str, out: np.ndarray, args, vjps):
    """Wrap ``out`` in a DiffNode when tracing, else a Tensor.

    ``vjps`` aligns with ``args``: each entry is either None (input not
    differentiable / not a node) or a callable mapping the upstream
    gradient array to this input's gradient contribution.
    """
    if not _should_trace(args):
        return Tensor(out)
    parents = []
    slot_fns = []
    for arg, vjp in zip(args, vjps):
        if isinstance(arg, DiffNode) and vjp is not None:
            parents.append((arg, f"{op_name}.arg{len(parents)}"))
            slot_fns.append(vjp)

    def vjp_all(g, fns=tuple(slot_fns)):
        return tuple(fn(g) for fn in fns)

    return DiffNode(Tensor(out), parents, vjp_all)


def backward(root: DiffNode) -> dict[DiffNode, Tensor]:
    """Accumulate dRoot/dNode over the graph reachable from a scalar root.

    Returns the gradient map for leaf nodes (nodes without parents);
    every visited node also carries its gradient in ``node.grad``.
    Accumulation runs in reverse creation order, which is a fixed
    topological order of the graph, so results do not depend on how the
    caller happened to traverse or permute anything.
    """
    if root.value.size != 1:
        raise NonScalarRootError(f"backward root must be scalar, got shape {root.value.shape}")

    visited: dict[int, DiffNode] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in visited:
            continue
        visited[node._id] = node
        for parent, _rule in node.parents:
            if parent._id not in visited:
                stack.append(parent)

    order = sorted(visited.values(), key=lambda n: n._id, reverse=True)
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.value.data)}
    for node in order:
        g = grads.get(node._id)
        if g is None:
            continue
        node.grad = Tensor(g)
        if not node.parents:
            continue
        contributions = node._vjp(g)
        for (parent, _rule), contrib in zip(node.parents, contributions):
            contrib = np.asarray(contrib, dtype=np.float64)
            if contrib.shape != parent.value.shape:
                raise ShapeMismatchError("backward", contrib.shape, parent.value.shape)
            acc = grads.get(parent._id)
            if acc is None:
                grads[parent._id] = contrib.copy()
            else:
                acc += contrib
    return {node: node.grad for node in visited.values() if not node.parents and node.grad is not None}


@dataclass(frozen=True)
class CustomGradOp:
    """An operation with a hand-derived backward rule.

    ``forward`` maps input arrays to the output array; ``backward`` maps
    (inputs, output, upstream gradient) to one gradient per input, with
    None marking inputs that are not differentiable.
    """

    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Sequence]


def apply_custom(op: CustomGradOp, *args):
    arrays = tuple(value_of(a) for a in args)
    out = np.asarray(op.forward(*arrays), dtype=np.float64)
    if not _should_trace(args):
        return Tensor(out)

    parents = []
    slots = []
    for i, arg in enumerate(args):
        if isinstance(arg, DiffNode):
            parents.append((arg, f"{op.name}.arg{i}"))
            slots.append(i)

    def vjp_all(g):
        full = op.backward(arrays, out, g)
        picked = []
        for i in slots:
            gi = full[i]
            if gi is None:
                raise ValueError(f"{op.name}: no gradient for traced input {i}")
            picked.append(gi)
        return tuple(picked)

    return DiffNode(Tensor(out), parents, vjp_all)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, xa, xb):
    try:
        return np.broadcast_shapes(xa.shape, xb.shape)
    except ValueError:
        raise ShapeMismatchError(op, xa.shape, xb.shape) from None


def add(a, b):
    xa, xb = value_of(a), value_of(b)
    _broadcast_check("add", xa, xb)
    return _finish(
        "add",
        xa + xb,
        (a, b),
        (lambda g: _unbroadcast(g, xa.shape), lambda g: _unbroadcast(g, xb.shape)),
    )


def sub(a, b):
    xa, xb = value_of(a), value_of(b)
    _broadcast_check("sub", xa, xb)
    return _finish(
        "sub",
        xa - xb,
        (a, b),
        (lambda g: _unbroadcast(g, xa.shape), lambda g: _unbroadcast(g, xb.shape)),
    )


def mul(a, b):
    xa, xb = value_of(a), value_of(b)
    _broadcast_check("mul", xa, xb)
    return _finish(
        "mul",
        xa * xb,
        (a, b),
        (lambda g: _unbroadcast(g * xb, xa.shape), lambda g: _unbroadcast(g * xa, xb.shape)),
    )


def div(a, b):
    xa, xb = value_of(a), value_of(b)
    _broadcast_check("div", xa, xb)
    return _finish(
        "div",
        xa / xb,
        (a, b),
        (
            lambda g: _unbroadcast(g / xb, xa.shape),
            lambda g: _unbroadcast(-g * xa / (xb * xb), xb.shape),
        ),
    )


def tsum(a, axis=None):
    xa = value_of(a)
    out = xa.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xa.shape).astype(np.float64)
        g_exp = np.expand_dims(g, axis)
        return np.broadcast_to(g_exp, xa.shape).astype(np.float64)

    return _finish("sum", np.asarray(out), (a,), (vjp,))


def tmean(a, axis=None):
    xa = value_of(a)
    out = xa.mean(axis=axis)
    count = xa.size if axis is None else xa.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, xa.shape).astype(np.float64)
        g_exp = np.expand_dims(g, axis) / count
        return np.broadcast_to(g_exp, xa.shape).astype(np.float64)

    return _finish("mean", np.asarray(out), (a,), (vjp,))


def sqnorm(a):
    """Squared L2 norm, sum of squares over all entries."""
    xa = value_of(a)
    out = np.asarray(np.dot(xa.ravel(), xa.ravel()))
    return _finish("sqnorm", out, (a,), (lambda g: (2.0 * g) * xa,))


def dot(a, b):
    """Inner product over all entries (not a matmul: shapes must match)."""
    xa, xb = value_of(a), value_of(b)
    if xa.shape != xb.shape:
        raise ShapeMismatchError("dot", xa.shape, xb.shape)
    out = np.asarray(np.dot(xa.ravel(), xb.ravel()))
    return _finish("dot", out, (a, b), (lambda g: g * xb, lambda g: g * xa))


def concat(parts, axis=0):
    arrays = [value_of(p) for p in parts]
    out = np.concatenate(arrays, axis=axis)
    sizes = [arr.shape[axis] for arr in arrays]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _finish("concat", out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def stack(parts, axis=0):
    arrays = [value_of(p) for p in parts]
    out = np.stack(arrays, axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _finish("stack", out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def slice_(a, slices):
    """Basic slicing with a tuple of slice objects."""
    xa = value_of(a)
    slices = tuple(slices)
    out = xa[slices]

    def vjp(g):
        full = np.zeros_like(xa)
        full[slices] = g
        return full

    return _finish("slice", np.ascontiguousarray(out), (a,), (vjp,))


def reshape(a, shape):
    xa = value_of(a)
    out = xa.reshape(shape)
    return _finish("reshape", np.ascontiguousarray(out), (a,), (lambda g: g.reshape(xa.shape),))


# ---------------------------------------------------------------------------
# activations


def leaky_relu(a, slope: float = 0.2):
    xa = value_of(a)
    out = np.where(xa >= 0, xa, slope * xa)
    return _finish("leaky_relu", out, (a,), (lambda g: g * np.where(xa >= 0, 1.0, slope),))


def sigmoid(a):
    xa = value_of(a)
    out = np.empty_like(xa)
    pos = xa >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xa[pos]))
    ex = np.exp(xa[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _finish("sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# conv2d and nearest-neighbour upsampling

_col_index_cache: dict[tuple, np.ndarray] = {}


def _col_indices(c_in, h_pad, w_pad, k, stride, h_out, w_out):
    key = (c_in, h_pad, w_pad, k, stride, h_out, w_out)
    idx = _col_index_cache.get(key)
    if idx is None:
        ii, jj = np.meshgrid(np.arange(h_out) * stride, np.arange(w_out) * stride, indexing="ij")
        base = ii[..., None, None] * w_pad + jj[..., None, None]  # (h_out, w_out, 1, 1)
        ki, kj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        offs = (ki * w_pad + kj).reshape(1, 1, k, k)
        plane = (base + offs).reshape(h_out * w_out, k * k)
        chan = (np.arange(c_in) * (h_pad * w_pad)).reshape(1, c_in, 1)
        idx = (plane[:, None, :] + chan).reshape(h_out * w_out, c_in * k * k)
        _col_index_cache[key] = idx
    return idx


def conv2d(x, kernel, stride: int = 1, padding: int = 0):
    """2-D cross-correlation with zero padding.

    ``x`` is (C_in, H, W), ``kernel`` is (C_out, C_in, k, k) with odd k;
    differentiable with respect to both input and kernel.
    """
    xa, ka = value_of(x), value_of(kernel)
    if xa.ndim != 3 or ka.ndim != 4:
        raise ShapeMismatchError("conv2d", xa.shape, ka.shape)
    c_out, c_k, k, k2 = ka.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {ka.shape}")
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    c_in, h, w = xa.shape
    if c_k != c_in:
        raise ShapeMismatchError("conv2d channels", xa.shape, ka.shape)
    h_pad, w_pad = h + 2 * padding, w + 2 * padding
    h_out = (h_pad - k) // stride + 1
    w_out = (w_pad - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"conv2d: empty output for input {xa.shape} kernel {ka.shape}")

    xp = np.pad(xa, ((0, 0), (padding, padding), (padding, padding))) if padding else xa
    idx = _col_indices(c_in, h_pad, w_pad, k, stride, h_out, w_out)
    cols = xp.reshape(-1)[idx]  # (h_out*w_out, c_in*k*k)
    kmat = ka.reshape(c_out, -1)
    out = (cols @ kmat.T).T.reshape(c_out, h_out, w_out)

    def vjp_x(g):
        gmat = g.reshape(c_out, -1).T  # (h_out*w_out, c_out)
        dcols = gmat @ kmat  # (h_out*w_out, c_in*k*k)
        flat = np.bincount(idx.ravel(), weights=dcols.ravel(), minlength=c_in * h_pad * w_pad)
        gx = flat.reshape(c_in, h_pad, w_pad)
        if padding:
            gx = gx[:, padding:-padding, padding:-padding]
        return np.ascontiguousarray(gx)

    def vjp_k(g):
        gmat = g.reshape(c_out, -1)  # (c_out, h_out*w_out)
        return (gmat @ cols).reshape(ka.shape)

    return _finish("conv2d", out, (x, kernel), (vjp_x, vjp_k))


def upsample_nearest(x, factor: int = 2):
    """Nearest-neighbour upsampling of a (C, H, W) tensor."""
    xa = value_of(x)
    if xa.ndim != 3:
        raise ShapeMismatchError("upsample_nearest", xa.shape, ("C", "H", "W"))
    out = xa.repeat(factor, axis=1).repeat(factor, axis=2)
    c, h, w = xa.shape

    def vjp(g):
        return g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))

    return _finish("upsample_nearest", out, (x,), (vjp,))


def as_node(x) -> DiffNode:
    """Promote a value to a leaf DiffNode (no-op for existing nodes)."""
    if isinstance(x, DiffNode):
        return x
    return DiffNode.leaf(x)
