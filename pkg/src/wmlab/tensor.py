"""Minimal reverse-mode autodiff on float64 numpy arrays.

Each op returns a new Tensor holding its inputs and a backward closure;
backward() walks the graph in reverse topological order and accumulates
gradients additively, so a tensor used on several paths receives the sum.
Elementwise ops require equal shapes (or a Python scalar operand); there
is no general broadcasting. Bias addition over batch rows has its own op.
"""

from __future__ import annotations

import numpy as np

from . import kernels

# probabilities are clamped to this range before any log, so BCE and the
# GAN-style log losses never produce infinities
EPS_PROB = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_gbuf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._bwd = None
        self._gbuf = None  # persistent buffer reused for first-touch matmul grads

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalar operands stay Python floats
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # own=True promises g is a fresh array the caller will not reuse, so the
    # first accumulation can adopt it instead of copying
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(data, parents, bwd) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._bwd = bwd
        out.requires_grad = True
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every tensor the scalar loss depends on."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


def _shapes_equal(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} "
                         "not conformable")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T, own=True)
        if b.requires_grad:
            if b.grad is None:
                # write straight into the reusable buffer; fresh 30MB+
                # temporaries would page-fault on every training step
                if b._gbuf is None:
                    b._gbuf = np.empty_like(b.data)
                np.matmul(a.data.T, g, out=b._gbuf)
                b.grad = b._gbuf
            else:
                b.grad += a.data.T @ g

    return _make(a.data @ b.data, (a, b), bwd)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        def bwd(g):
            _accumulate(a, g)
        return _make(a.data + float(b), (a,), bwd)
    _shapes_equal(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def subtract(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        def bwd(g):
            _accumulate(a, g)
        return _make(a.data - float(b), (a,), bwd)
    _shapes_equal(a, b, "subtract")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g, own=True)

    return _make(a.data - b.data, (a, b), bwd)


def multiply(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        s = float(b)

        def bwd(g):
            _accumulate(a, g * s)
        return _make(a.data * s, (a,), bwd)
    _shapes_equal(a, b, "multiply")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * b.data, own=True)
        if b.requires_grad:
            _accumulate(b, g * a.data, own=True)

    return _make(a.data * b.data, (a, b), bwd)


def negate(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, -g, own=True)

    return _make(-a.data, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g * np.sign(a.data), own=True)

    return _make(np.abs(a.data), (a,), bwd)


def add_bias(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-D bias row to every row of a (B, D) matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_bias: shapes {m.data.shape} and {v.data.shape} "
                         "not conformable")

    def bwd(g):
        if m.requires_grad:
            _accumulate(m, g)
        if v.requires_grad:
            _accumulate(v, g.sum(axis=0), own=True)

    return _make(m.data + v.data, (m, v), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, kernels.relu_grad(g, a.data), own=True)

    return _make(kernels.relu(a.data), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    s = kernels.sigmoid(a.data)

    def bwd(g):
        _accumulate(a, g * s * (1.0 - s), own=True)

    return _make(s, (a,), bwd)


def log(a: Tensor) -> Tensor:
    # floor at EPS_PROB so log never sees zero; flat (zero grad) below it
    clamped = np.maximum(a.data, EPS_PROB)
    live = a.data > EPS_PROB

    def bwd(g):
        _accumulate(a, g * live / clamped, own=True)

    return _make(np.log(clamped), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out, own=True)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        _accumulate(a, np.full_like(a.data, g / n), own=True)

    return _make(a.data.mean(), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, np.full_like(a.data, g), own=True)

    return _make(a.data.sum(), (a,), bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-softmax against integer class labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.data.shape} "
                         f"vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.data.shape[1]:
        raise ValueError("label out of range for logit width")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    batch = z.shape[0]
    picked = z[np.arange(batch), labels]
    losses = np.log(ez.sum(axis=1)) - picked

    def bwd(g):
        d = sm.copy()
        d[np.arange(batch), labels] -= 1.0
        _accumulate(logits, d * (g / batch), own=True)

    return _make(losses.mean(), (logits,), bwd)


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean BCE of probabilities against constant targets in [0, 1]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ShapeError(f"binary_cross_entropy: shapes {pred.data.shape} "
                         f"and {t.shape} differ")
    p = np.clip(pred.data, EPS_PROB, 1.0 - EPS_PROB)
    live = (pred.data > EPS_PROB) & (pred.data < 1.0 - EPS_PROB)
    n = p.size
    val = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()

    def bwd(g):
        _accumulate(pred, g * live * (p - t) / (p * (1.0 - p)) / n, own=True)

    return _make(val, (pred,), bwd)


def squared_error(pred: Tensor, target) -> Tensor:
    """Mean squared error against constant targets."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ShapeError(f"squared_error: shapes {pred.data.shape} and {t.shape} differ")
    n = pred.data.size
    diff = pred.data - t

    def bwd(g):
        _accumulate(pred, g * 2.0 * diff / n, own=True)

    return _make((diff * diff).mean(), (pred,), bwd)


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if not t.requires_grad:
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(data, tuple(tensors), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full, own=True)

    return _make(a.data[start:stop].copy(), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape).copy(), (a,), bwd)


def sort_descending(a: Tensor) -> Tensor:
    """Sort all values in descending order, keeping the input shape.

    The permutation itself is chosen from the current values and carries no
    derivative; gradients route back through the inverse permutation. Ties
    keep their original order, so the result is deterministic.
    """
    flat = a.data.reshape(-1)
    idx = np.argsort(-flat, kind="stable")

    def bwd(g):
        gx = np.empty_like(flat)
        gx[idx] = g.reshape(-1)
        _accumulate(a, gx.reshape(a.data.shape), own=True)

    return _make(flat[idx].reshape(a.data.shape), (a,), bwd)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
