"""Minimal dense-tensor library with define-by-run reverse-mode autodiff.

Every differentiable operation returns a :class:`Tensor` holding a
:class:`Node` that remembers its inputs and a closure mapping the output
gradient to input gradients. :func:`backward` collects the nodes reachable
from a scalar loss into a :class:`Tape` (topological order) and walks it once
in reverse. Nodes release their saved intermediates after use, so a second
backward through the same graph is rejected.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import (
    BackwardError,
    DegenerateMaskError,
    DimensionError,
    DomainError,
    ParameterError,
)

LOG_FLOOR = 1e-12
NORM_FLOOR = kernels.NORM_FLOOR

_counter = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, teacher passes)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    __slots__ = ("inputs", "backward_fn", "order", "consumed", "name")

    def __init__(self, name, inputs, backward_fn):
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.order = next(_counter)
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self, floor=0.0):
        return log(self, floor)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_rows(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _record(name, out_data, inputs, backward_fn):
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(name, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Nodes reachable from a loss, ordered so every input precedes its consumer."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        seen = set()
        nodes = []
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append((node, t))
            stack.extend(node.inputs)
        # creation order is a valid topological order for define-by-run graphs
        nodes.sort(key=lambda pair: pair[0].order)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        for node, _ in self.nodes:
            if node.consumed:
                raise BackwardError(
                    f"graph already differentiated at node '{node.name}'; "
                    "rebuild the forward pass before calling backward again"
                )
        grads = {id(loss): np.ones_like(loss.data)}
        for node, out in reversed(self.nodes):
            g = grads.pop(id(out), None)
            node.consumed = True
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            node.backward_fn = None
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig


def backward(loss):
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    Tape.from_loss(loss).backward(loss)


# elementwise and reductions


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a):
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def reciprocal(a):
    inv = 1.0 / a.data
    return _record("reciprocal", inv, (a,), lambda g: (-g * inv * inv,))


def exp(a):
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a, floor=0.0):
    shifted = a.data + floor
    if np.any(shifted < 0):
        raise DomainError("log of a negative value")
    with np.errstate(divide="ignore"):
        out = np.log(shifted)
    return _record("log", out, (a,), lambda g: (g / shifted,))


def relu(a):
    live = a.data > 0
    return _record("relu", np.where(live, a.data, 0.0), (a,), lambda g: (g * live,))


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def transpose(a):
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def take_rows(a, index):
    index = np.asarray(index) if not isinstance(index, slice) else index
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("take_rows", a.data[index], (a,), back)


def concat_rows(tensors):
    tensors = [as_tensor(t) for t in tensors]
    widths = {t.shape[1:] for t in tensors}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows needs equal trailing shapes, got {sorted(widths)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    return _record(
        "concat_rows",
        np.concatenate([t.data for t in tensors], axis=0),
        tuple(tensors),
        lambda g: tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else out + bias


# fused primitives used by the losses


def _check_mask(mask, width):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (width,):
        raise DimensionError(f"mask shape {mask.shape} does not match {width} columns")
    if not mask.any():
        raise DegenerateMaskError("mask excludes every column")
    return mask


def softmax_t(logits, temperature=1.0, mask=None):
    """Row softmax of ``logits / temperature``; masked-out columns are exactly 0."""
    logits = as_tensor(logits)
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    scaled = logits.data / temperature
    if mask is not None:
        mask = _check_mask(mask, logits.shape[-1])
        scaled = np.where(mask, scaled, -np.inf)
    top = scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled - top)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _record("softmax_t", out, (logits,), back)


def l2_normalize(x):
    x = as_tensor(x)
    unit, norms = kernels.row_normalize(x.data)
    return _record(
        "l2_normalize",
        unit,
        (x,),
        lambda g: (kernels.normalize_backward(g, unit, norms),),
    )


def cosine_sim(a, b):
    """Pairwise cosine similarity between rows of ``a`` (n x d) and ``b`` (m x d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_sim width mismatch: {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def snn(queries, supports, targets, temperature):
    """Fused soft nearest-neighbor assignment, backed by the compiled kernel."""
    queries, supports, targets = as_tensor(queries), as_tensor(supports), as_tensor(targets)
    if queries.shape[1] != supports.shape[1]:
        raise DimensionError(
            f"query width {queries.shape} does not match support width {supports.shape}"
        )
    if targets.shape[0] != supports.shape[0]:
        raise DimensionError(f"{targets.shape[0]} targets for {supports.shape[0]} supports")
    probs, *cache = kernels.snn_forward(queries.data, supports.data, targets.data, temperature)

    def back(g):
        return kernels.snn_backward(g, targets.data, *cache, temperature)

    return _record("snn", probs, (queries, supports, targets), back)


def _check_simplex(x, what, tol=1e-6):
    if np.any(x < 0):
        raise DomainError(f"{what} has negative entries")
    if not np.allclose(x.sum(axis=-1), 1.0, atol=tol):
        raise DomainError(f"{what} rows do not sum to 1")


def cross_entropy(pred, target):
    """Mean over rows of ``-sum(target * log(pred + floor))``; target is constant."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"cross_entropy shape mismatch: {pred.shape} vs {t.shape}")
    _check_simplex(pred.data, "prediction")
    _check_simplex(t, "target")
    rows = pred.shape[0]
    shifted = pred.data + LOG_FLOOR
    value = -(t * np.log(shifted)).sum() / rows
    return _record("cross_entropy", value, (pred,), lambda g: (-g * t / shifted / rows,))


def entropy(p):
    """Shannon entropy (natural log) of a single distribution or of each row."""
    p = as_tensor(p)
    return -tsum(p * log(p, LOG_FLOOR), axis=-1)
