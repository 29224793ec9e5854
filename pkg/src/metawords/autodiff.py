"""Reverse-mode automatic differentiation on dense float64 arrays.

A thin tape-based autograd layer over numpy: every operation computes its
forward value eagerly and, when a Tape is active, records a backward rule.
Backward replays the tape in reverse creation order, which is a valid
reverse topological order because tensors are appended as they are made.

Everything is double precision. Kernels are deterministic: no RNG, and
reductions use numpy's fixed deterministic order, so replaying a forward
pass reproduces bit-identical arrays.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

OP_KINDS = (
    "matmul", "add", "sub", "elementwise-mul", "concat", "slice",
    "sigmoid", "tanh", "softmax", "log", "exp", "embedding-lookup",
    "sum", "mean", "l2-norm",
)

_ids = itertools.count()
_local = threading.local()


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform to an op kind."""

    def __init__(self, op_kind, *shapes):
        self.op_kind = op_kind
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op_kind}: non-conforming shapes {detail}")


class GradientError(RuntimeError):
    """Raised when gradient computation hits an invalid state."""


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of operations for one forward pass.

    Use as a context manager around a forward computation; discarded after
    backward. Tapes are never shared between threads.
    """

    def __init__(self):
        self.nodes = []

    def record(self, out, parents, backward_fn):
        self.nodes.append((out, parents, backward_fn))

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False


class DiffTensor:
    """Dense float64 array with a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.node_id = next(_ids)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, id={self.node_id})"

    # Operator sugar; scalars are wrapped as non-grad constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def param(data):
    """A learnable leaf tensor."""
    return DiffTensor(data, requires_grad=True)


def const(data):
    """A non-learnable leaf tensor (masks, one-hots, literals)."""
    return DiffTensor(data, requires_grad=False)


def _wrap(x):
    return x if isinstance(x, DiffTensor) else const(x)


def _make(data, parents, backward_fn):
    out = DiffTensor(data, requires_grad=any(p.requires_grad for p in parents))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum-reduce g over axes that were broadcast relative to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(sa, sb):
    for a, b in zip(reversed(sa), reversed(sb)):
        if a != b and a != 1 and b != 1:
            return False
    return True


# -----------------------------------------------------------------------------
# Operations


def matmul(a, b):
    """a @ b with b a 2-D weight; a may be 1-D, 2-D, or batched 3-D."""
    if b.ndim != 2 or a.ndim not in (1, 2, 3) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        a.accumulate(g @ b.data.T)
        n = a.shape[-1]
        b.accumulate(a.data.reshape(-1, n).T @ g.reshape(-1, b.shape[1]))

    return _make(out, (a, b), backward)


def add(a, b):
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch("add", a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b):
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch("sub", a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b):
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch("elementwise-mul", a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat", ())
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
            i != axis and t.shape[i] != first[i] for i in range(len(first))
        ):
            raise ShapeMismatch("concat", first, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, start + size)
            t.accumulate(g[tuple(key)])
            start += size

    return _make(out, tuple(tensors), backward)


def slice_(x, key):
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        x.accumulate(full)

    return _make(out, (x,), backward)


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        x.accumulate(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1.0 - out * out))

    return _make(out, (x,), backward)


def softmax(x, axis=-1, mask=None):
    """Softmax along `axis`; masked-out entries get exactly zero probability.

    `mask` is a numpy bool array broadcastable to x.shape (True = keep).
    Rows with at least one kept entry form a probability vector.
    """
    if mask is None:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        denom = e.sum(axis=axis, keepdims=True)
        out = e / denom
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise GradientError("softmax: some rows are fully masked")
        neg = np.where(mask, x.data, -np.inf)
        shifted = neg - neg.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
        out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        x.accumulate(out * (g - inner))

    return _make(out, (x,), backward)


def log(x):
    out = np.log(x.data)

    def backward(g):
        x.accumulate(g / x.data)

    return _make(out, (x,), backward)


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        x.accumulate(g * out)

    return _make(out, (x,), backward)


def embedding_lookup(table, ids):
    """Gather rows of a 2-D table; ids is a plain integer array."""
    if table.ndim != 2:
        raise ShapeMismatch("embedding-lookup", table.shape)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding-lookup: id out of range for table of {table.shape[0]} rows"
        )
    out = table.data[ids]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(out, (table,), backward)


def reduce_sum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.shape).copy())

    return _make(out, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.shape) / count)

    return _make(out, (x,), backward)


def l2_norm(x, axis=-1, keepdims=True):
    """Euclidean norm along `axis`; subgradient 0 at the origin."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    out = norm if keepdims else norm.squeeze(axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(norm > 0.0, norm, 1.0)
        x.accumulate(np.where(norm > 0.0, g * x.data / safe, 0.0))

    return _make(out, (x,), backward)


def log_softmax(x, axis=-1):
    """Numerically exact log of softmax, safe under logit saturation.

    Composed from primitive ops: the max shift is a constant, which leaves
    gradients exact because log-softmax is shift invariant.
    """
    shift = const(x.data.max(axis=axis, keepdims=True))
    shifted = sub(x, shift)
    lse = log(reduce_sum(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


_DISPATCH = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "elementwise-mul": lambda inputs, attrs: mul(*inputs),
    "concat": lambda inputs, attrs: concat(inputs, attrs["axis"]),
    "slice": lambda inputs, attrs: slice_(inputs[0], attrs["key"]),
    "sigmoid": lambda inputs, attrs: sigmoid(inputs[0]),
    "tanh": lambda inputs, attrs: tanh(inputs[0]),
    "softmax": lambda inputs, attrs: softmax(
        inputs[0], attrs.get("axis", -1), attrs.get("mask")
    ),
    "log": lambda inputs, attrs: log(inputs[0]),
    "exp": lambda inputs, attrs: exp(inputs[0]),
    "embedding-lookup": lambda inputs, attrs: embedding_lookup(inputs[0], attrs["ids"]),
    "sum": lambda inputs, attrs: reduce_sum(
        inputs[0], attrs.get("axis"), attrs.get("keepdims", False)
    ),
    "mean": lambda inputs, attrs: reduce_mean(
        inputs[0], attrs.get("axis"), attrs.get("keepdims", False)
    ),
    "l2-norm": lambda inputs, attrs: l2_norm(
        inputs[0], attrs.get("axis", -1), attrs.get("keepdims", True)
    ),
}


def apply(op_kind, inputs, attrs=None):
    """Uniform entry point: dispatch `op_kind` over DiffTensor inputs."""
    if op_kind not in _DISPATCH:
        raise ValueError(f"unknown op kind: {op_kind!r}")
    return _DISPATCH[op_kind](list(inputs), attrs or {})


# -----------------------------------------------------------------------------
# Backward pass and gradient checking


def backward(loss, params=None):
    """Propagate gradients from a scalar loss back through the active tape.

    Returns a map node-id -> gradient array covering every tensor in
    `params` (zeros for parameters the loss never touched). Gradients are
    also accumulated into each tensor's .grad buffer.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = active_tape()
    if tape is None or not tape.nodes:
        raise GradientError("backward: no active tape with recorded operations")
    loss.accumulate(np.ones_like(loss.data))
    for out, parents, backward_fn in reversed(tape.nodes):
        if out.grad is not None:
            backward_fn(out.grad)
    result = {}
    if params is not None:
        for p in params:
            result[p.node_id] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return result


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def grad_check(f, inputs, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the given DiffTensor list to a scalar DiffTensor and must be a
    pure function of their .data. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for x in inputs:
        x.grad = None
    with Tape():
        out = f(inputs)
        if out.data.size != 1:
            raise GradientError("grad_check: function must return a scalar")
        backward(out)
    analytic = [
        x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs
    ]
    worst = 0.0
    for i, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = f(inputs).item()
            flat[j] = orig - epsilon
            fm = f(inputs).item()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientError(
                    f"grad_check: non-finite probe at input {i}, coordinate {j}"
                )
            numeric = (fp - fm) / (2.0 * epsilon)
            ana = analytic[i].reshape(-1)[j]
            err = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            worst = max(worst, err)
    return worst
