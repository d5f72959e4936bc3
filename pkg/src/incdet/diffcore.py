"""Dense float64 tensors with tape-based reverse-mode differentiation.

Small on purpose: only the primitives the detector and its losses need.
Elementwise ops require identical shapes or a scalar operand (no general
broadcasting); ``add_bias`` is the one matrix-plus-row-vector special case.
"""
from __future__ import annotations

import threading

import numpy as np

# Probabilities are clamped here before any log/div so teacher outputs that
# saturate to 0/1 stay finite.
EPS = 1e-12


class DiffError(Exception):
    pass


class ShapeError(DiffError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NumericsError(DiffError):
    pass


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in creation order, which is a topological order by
    construction. Leaf tensors (parameters, inputs) that require grad are
    registered the first time an op consumes them.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}  # id(tensor) -> tensor, insertion ordered

    def register_leaf(self, t):
        self.leaves.setdefault(id(t), t)


_tls = threading.local()


def _active_tape(create=True):
    tape = getattr(_tls, "tape", None)
    if tape is None and create:
        tape = Tape()
        _tls.tape = tape
    return tape


def _clear_active(tape):
    if getattr(_tls, "tape", None) is tape:
        _tls.tape = None


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_tape", "_index", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._index = -1
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0])

    def detach(self):
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values):
    return Tensor(values)


def _finite_or_raise(op, values):
    if not np.all(np.isfinite(values)):
        raise NumericsError(f"{op}: non-finite values produced")


def _make(op, out_values, parents, backward_fn):
    _finite_or_raise(op, out_values)
    out = Tensor(out_values, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        tape = _active_tape()
        for p in parents:
            if p.requires_grad and p._backward is None:
                tape.register_leaf(p)
        out._tape = tape
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._index = len(tape.nodes)
        tape.nodes.append(out)
    return out


def _is_scalar_shape(shape):
    return int(np.prod(shape, dtype=np.int64)) == 1


def _check_elementwise(op, a, b):
    if a.shape != b.shape and not _is_scalar_shape(a.shape) and not _is_scalar_shape(b.shape):
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad, shape):
    # undo a scalar-tensor broadcast during backward
    if grad.shape != shape:
        grad = np.sum(grad).reshape(shape) if shape != () else np.float64(np.sum(grad))
        grad = np.asarray(grad, dtype=np.float64).reshape(shape)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    out = a.values + b.values

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make("add", out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    out = a.values - b.values

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make("sub", out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    out = a.values * b.values

    def backward(g):
        return _reduce_to(g * b.values, a.shape), _reduce_to(g * a.values, b.shape)

    return _make("mul", out, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a, b)
    denom = np.maximum(b.values, EPS)
    out = a.values / denom

    def backward(g):
        mask = (b.values >= EPS).astype(np.float64)
        ga = _reduce_to(g / denom, a.shape)
        gb = _reduce_to(-g * a.values / (denom * denom) * mask, b.shape)
        return ga, gb

    return _make("div", out, (a, b), backward)


def add_bias(mat, vec):
    mat, vec = as_tensor(mat), as_tensor(vec)
    if mat.values.ndim != 2 or vec.values.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError("add_bias", mat.shape, vec.shape)
    out = mat.values + vec.values[None, :]

    def backward(g):
        return g, g.sum(axis=0)

    return _make("add_bias", out, (mat, vec), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.values @ b.values

    def backward(g):
        return g @ b.values.T, a.values.T @ g

    return _make("matmul", out, (a, b), backward)


def tsum(a, axis=None):
    a = as_tensor(a)
    out = np.sum(a.values, axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(a.shape, g, dtype=np.float64),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def tmean(a, axis=None):
    a = as_tensor(a)
    out = np.mean(a.values, axis=axis)
    n = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(a.shape, g / n, dtype=np.float64),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _make("mean", np.asarray(out), (a,), backward)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.values, 0.0)

    def backward(g):
        return (g * (a.values > 0.0),)

    return _make("relu", out, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out = np.where(a.values >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.values))),
                   np.exp(-np.abs(a.values)) / (1.0 + np.exp(-np.abs(a.values))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), backward)


def log(a):
    a = as_tensor(a)
    clamped = np.maximum(a.values, EPS)
    out = np.log(clamped)

    def backward(g):
        return (g / clamped * (a.values >= EPS),)

    return _make("log", out, (a,), backward)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.values)

    def backward(g):
        return (g * out,)

    return _make("exp", out, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(np.maximum(a.values, 0.0))

    def backward(g):
        safe = np.maximum(out, 1e-12)
        return (g * 0.5 / safe * (a.values > 1e-24),)

    return _make("sqrt", out, (a,), backward)


def clamp(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.values, lo, hi)

    def backward(g):
        return (g * ((a.values >= lo) & (a.values <= hi)),)

    return _make("clamp", out, (a,), backward)


def take(a, indices, axis):
    """Select slices along an axis (same index set for every row/column)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.values, idx, axis=axis)

    def backward(g):
        ga = np.zeros(a.shape, dtype=np.float64)
        sl = [slice(None)] * a.values.ndim
        for k, j in enumerate(idx):
            sl[axis] = j
            gsl = [slice(None)] * a.values.ndim
            gsl[axis] = k
            ga[tuple(sl)] += g[tuple(gsl)]
        return (ga,)

    return _make("take", out, (a,), backward)


def gather_rows(a, col_indices):
    """out[i] = a[i, col_indices[i]] for a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(col_indices, dtype=np.intp)
    if a.values.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError("gather_rows", a.shape, idx.shape)
    rows = np.arange(a.shape[0])
    out = a.values[rows, idx]

    def backward(g):
        ga = np.zeros(a.shape, dtype=np.float64)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make("gather_rows", out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        sl = [slice(None)] * g.ndim
        for k in range(len(tensors)):
            sl[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(sl)].copy())
        return tuple(grads)

    return _make("concat", out, tuple(tensors), backward)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.values.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(root):
    """Populate .grad on every ancestor of a scalar root (zeros elsewhere on the tape)."""
    if not isinstance(root, Tensor):
        raise DiffError("backward: root must be a Tensor")
    if root.size != 1:
        raise DiffError(f"backward: root must be scalar, got shape {root.shape}")

    tape = root._tape
    if tape is None:
        # constant or unused leaf: nothing upstream
        root.grad = np.ones(root.shape, dtype=np.float64)
        return

    grads = {id(root): np.ones(root.shape, dtype=np.float64)}
    for node in reversed(tape.nodes[: root._index + 1]):
        g = grads.pop(id(node), None)
        node.grad = g if g is not None else np.zeros(node.shape, dtype=np.float64)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    for leaf in tape.leaves.values():
        g = grads.pop(id(leaf), None)
        leaf.grad = g if g is not None else np.zeros(leaf.shape, dtype=np.float64)

    _clear_active(tape)
