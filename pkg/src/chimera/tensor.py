"""Dense float64 tensors with a small reverse-mode tape.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient. Outside a tape every result is a
plain detached value, which is how evaluation code avoids bookkeeping.

    with Tape() as tape:
        loss = mean(square(matmul(x, w)))
    tape.backward(loss)
    w.grad  # d loss / d w
"""

from __future__ import annotations

import numpy as np

OP_KINDS = (
    "matmul", "add", "sub", "mul", "scale", "relu", "exp", "log",
    "softmax", "log_softmax", "l2_normalize", "mean", "sum", "square",
    "concat", "select_rows", "transpose", "clamp_min",
)

NORM_EPS = 1e-300


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.ravel().tolist()

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE = []


class Tape:
    """Records differentiable operations in execution order.

    A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes = []
        self._ids = set()
        self._consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, node):
        self.nodes.append(node)
        self._ids.add(id(node))

    def backward(self, output):
        if self._consumed:
            raise TapeError("backward already ran on this tape; start a new Tape")
        if output.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        if output._node is None or id(output._node) not in self._ids:
            raise TapeError("output was not produced on this tape (detached)")
        self._consumed = True

        grads = {id(output): np.ones_like(output.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            for t in node.inputs:
                if t.requires_grad and t._node is None:
                    leaves.setdefault(id(t), t)
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)


def _emit(kind, inputs, out_data, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(kind, inputs, out, backward_fn)
        out._node = node
        _ACTIVE[-1].record(node)
    return out


def _unbroadcast(g, shape):
    # Only row-wise broadcasting of a vector across a matrix, or a scalar.
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.ndim == 2):
        return np.asarray(g.sum()).reshape(shape)
    if len(shape) == 1 and g.ndim == 2:
        return g.sum(axis=0)
    if len(shape) == 2 and shape[0] == 1 and g.ndim == 2:
        return g.sum(axis=0, keepdims=True)
    return g.sum().reshape(shape)


def _check_broadcast(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sa) == 2 and sb in ((sa[1],), (1, sa[1])):
        return
    if len(sb) == 2 and sa in ((sb[1],), (1, sb[1])):
        return
    raise ShapeError(op, sa, sb)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _emit("matmul", (a, b), A @ B, back)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), a.data + b.data, back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit("sub", (a, b), a.data - b.data, back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data

    def back(g):
        return (_unbroadcast(g * B, A.shape) if a.requires_grad else None,
                _unbroadcast(g * A, B.shape) if b.requires_grad else None)

    return _emit("mul", (a, b), A * B, back)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    X = a.data
    return _emit("log", (a,), np.log(X), lambda g: (g / X,))


def clamp_min(a, floor):
    a = as_tensor(a)
    keep = a.data >= floor
    return _emit("clamp_min", (a,), np.where(keep, a.data, floor), lambda g: (g * keep,))


def _rows(op, a):
    if a.data.ndim == 1:
        return a.data[None, :], True
    if a.data.ndim != 2:
        raise ShapeError(op, a.shape)
    return a.data, False


def log_softmax(a):
    """Row-wise log-softmax (a vector is treated as one row)."""
    a = as_tensor(a)
    X, flat = _rows("log_softmax", a)
    shifted = X - X.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    P = np.exp(out)

    def back(g):
        G = g[None, :] if flat else g
        gx = G - P * G.sum(axis=1, keepdims=True)
        return (gx[0] if flat else gx,)

    return _emit("log_softmax", (a,), out[0] if flat else out, back)


def softmax(a):
    a = as_tensor(a)
    X, flat = _rows("softmax", a)
    E = np.exp(X - X.max(axis=1, keepdims=True))
    P = E / E.sum(axis=1, keepdims=True)

    def back(g):
        G = g[None, :] if flat else g
        gx = P * (G - (G * P).sum(axis=1, keepdims=True))
        return (gx[0] if flat else gx,)

    return _emit("softmax", (a,), P[0] if flat else P, back)


def l2_normalize(a):
    a = as_tensor(a)
    X, flat = _rows("l2_normalize", a)
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        raise DomainError("l2_normalize: a row has zero norm")
    Y = X / norms

    def back(g):
        G = g[None, :] if flat else g
        gx = (G - Y * (G * Y).sum(axis=1, keepdims=True)) / norms
        return (gx[0] if flat else gx,)

    return _emit("l2_normalize", (a,), Y[0] if flat else Y, back)


def sum(a, axis=None):  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), out, back)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def square(a):
    a = as_tensor(a)
    X = a.data
    return _emit("square", (a,), X * X, lambda g: (2.0 * g * X,))


def concat(tensors):
    """Stack matrices (or vectors, as single rows) on top of each other."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat")
    mats = [t.data[None, :] if t.data.ndim == 1 else t.data for t in ts]
    widths = {m.shape[1] for m in mats if m.ndim == 2}
    if len(widths) != 1 or any(m.ndim != 2 for m in mats):
        raise ShapeError("concat", *(t.shape for t in ts))
    bounds = np.cumsum([0] + [m.shape[0] for m in mats])

    def back(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            piece = g[lo:hi]
            out.append(piece[0] if t.data.ndim == 1 else piece)
        return tuple(out)

    return _emit("concat", tuple(ts), np.concatenate(mats, axis=0), back)


def select_rows(a, index):
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim == 0 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise ShapeError("select_rows", a.shape, idx.shape)
    shape = a.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("select_rows", (a,), a.data[idx], back)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


_DISPATCH = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "relu": relu,
    "exp": exp, "log": log, "softmax": softmax, "log_softmax": log_softmax,
    "l2_normalize": l2_normalize, "square": square, "transpose": transpose,
}


def forward_op(kind, inputs, **attrs):
    """Apply an operation by name. Attribute-carrying kinds take keywords:
    ``scale(c=...)``, ``sum/mean(axis=...)``, ``select_rows(index=...)``,
    ``clamp_min(floor=...)``; ``concat`` takes the whole input list."""
    if kind == "scale":
        return scale(inputs[0], attrs["c"])
    if kind == "sum":
        return sum(inputs[0], axis=attrs.get("axis"))
    if kind == "mean":
        return mean(inputs[0], axis=attrs.get("axis"))
    if kind == "select_rows":
        return select_rows(inputs[0], attrs["index"])
    if kind == "clamp_min":
        return clamp_min(inputs[0], attrs["floor"])
    if kind == "concat":
        return concat(inputs)
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs)


def numeric_grad(fn, arrays, h=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` for each array.

    Works on raw numpy values so it never touches the tape.
    """
    grads = []
    for k, arr in enumerate(arrays):
        arr = np.array(arr, dtype=np.float64)
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            args = list(arrays[:k]) + [arr] + list(arrays[k + 1:])
            up = float(fn(*args))
            flat[i] = orig - h
            args = list(arrays[:k]) + [arr] + list(arrays[k + 1:])
            down = float(fn(*args))
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads
