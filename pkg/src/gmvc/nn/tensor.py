"""Reverse-mode differentiation over numpy arrays.

A ``Tensor`` wraps an ``np.ndarray`` plus the bookkeeping needed to run
backpropagation: parent links and a closure that routes an incoming
gradient to the parents. Graphs are built implicitly by the op
functions below whenever any input requires a gradient and gradient
recording is enabled; ``backward`` walks the graph once in reverse
topological order.

All ops preserve the dtype of their inputs (training runs at float32,
gradient checking at float64) and never mutate input arrays.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from gmvc import backend
from gmvc.errors import ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "parents", "bwd", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = ()
        self.bwd = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar; scalars stay raw floats (no const node needed)
    def __add__(self, other):
        return shift(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return shift(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return shift(neg(self), other)
        return sub(other, self)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_scalar(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float))


def _node(data, parents, bwd):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.bwd = bwd
    return out


def _acc(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum an upstream gradient down to a broadcast operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor, seed=None) -> None:
    """Run reverse-mode accumulation from ``root``.

    Leaf tensors with ``requires_grad`` collect into ``.grad`` (existing
    buffers accumulate in place, so parameter stores see ``+=``).
    """
    if not root.requires_grad:
        return
    if seed is None:
        seed = np.ones_like(root.data)
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    _acc(root, seed)
    for node in reversed(topo):
        if node.bwd is not None:
            node.bwd(node.grad)


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, -g)

    return _node(-a.data, (a,), bwd)


def scale(a: Tensor, s) -> Tensor:
    s = float(s)

    def bwd(g):
        _acc(a, g * s)

    return _node(a.data * a.data.dtype.type(s), (a,), bwd)


def shift(a: Tensor, s) -> Tensor:
    def bwd(g):
        _acc(a, g)

    return _node(a.data + a.data.dtype.type(float(s)), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _acc(a, g * out_data)

    return _node(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        _acc(a, g * (0.5 / out_data))

    return _node(out_data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        _acc(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out_data = backend._sigmoid(a.data)

    def bwd(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _acc(a, g * mask)

    return _node(np.where(mask, a.data, a.data.dtype.type(0)), (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        _acc(a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape))
        elif keepdims:
            _acc(a, np.broadcast_to(g, a.data.shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def concat(parts, axis: int) -> Tensor:
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        start = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            _acc(p, g[tuple(idx)])
            start += n

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _acc(a, full)

    return _node(a.data[idx].copy(), (a,), bwd)


def expand_time(a: Tensor, steps: int) -> Tensor:
    """(M, C) -> (M, steps, C) by repetition along a new middle axis."""
    m, c = a.data.shape

    def bwd(g):
        _acc(a, g.sum(axis=1))

    data = np.broadcast_to(a.data[:, None, :], (m, steps, c)).copy()
    return _node(data, (a,), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Row gather; duplicate indices accumulate on the way back."""
    idx = np.asarray(idx)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _acc(a, full)

    return _node(a.data[idx].copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and fused network ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for ND ``a`` (last axis contracts) and 2-D ``b``."""
    if b.data.ndim != 2 or a.data.ndim < 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes ({a.data.shape} @ {b.data.shape})"
        )

    def bwd(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            d_in, d_out = b.data.shape
            _acc(b, a.data.reshape(-1, d_in).T @ g.reshape(-1, d_out))

    return _node(a.data @ b.data, (a, b), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - dot))

    return _node(out_data, (a,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the true class. ``labels``: int array (B,)."""
    labels = np.asarray(labels)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    probs = e / se
    b = z.shape[0]
    lse = np.log(se)[:, 0] + m[:, 0]
    loss = (lse - z[np.arange(b), labels]).mean()

    def bwd(g):
        gz = probs.copy()
        gz[np.arange(b), labels] -= 1.0
        _acc(logits, gz * (g / b))

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), bwd)


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded kernel-3 convolution over axis 1 of (M, T, C_in)."""
    if x.data.ndim != 3 or x.data.shape[2] * 3 != w.data.shape[0]:
        raise ShapeError(
            f"conv1d: input {x.data.shape} incompatible with weights {w.data.shape}"
        )

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx, gw, gb = backend.conv1d_backward(x.data, w.data, g, x.requires_grad)
        if gx is not None:
            _acc(x, gx)
        _acc(w, gw)
        _acc(b, gb)

    return _node(backend.conv1d_forward(x.data, w.data, b.data), (x, w, b), bwd)


def lstm_gates(preact: Tensor, c_prev: Tensor) -> Tensor:
    """Pointwise LSTM cell update.

    Returns a packed (B, 2H) tensor ``[h | c]`` so that a single
    backward closure sees both the hidden-state and cell-state
    gradients; callers slice it apart with ``narrow``.
    """
    h_new, c_new, gates = backend.lstm_gates_forward(preact.data, c_prev.data)
    nh = c_new.shape[1]

    def bwd(g):
        gh = np.ascontiguousarray(g[:, :nh])
        gc = np.ascontiguousarray(g[:, nh:])
        gpre, gc_prev = backend.lstm_gates_backward(
            gates, c_prev.data, c_new, gh, gc
        )
        _acc(preact, gpre)
        _acc(c_prev, gc_prev)

    return _node(np.concatenate((h_new, c_new), axis=1), (preact, c_prev), bwd)
