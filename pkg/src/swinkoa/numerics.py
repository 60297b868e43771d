"""A small dense-tensor engine with tape-based reverse-mode autodiff.

Tensors wrap a float32 numpy array. Every differentiable op records its
parents and a backward closure on the output; :func:`backward` orders the
reachable graph topologically (the tape) and replays it in reverse, visiting
each node once. Leaf gradients accumulate across calls until reset.

Broadcasting is limited to what the ops below declare: ``add``/``mul``/``sub``
follow numpy rules for trailing dimensions and reduce gradients back to the
operand shape; ``matmul`` accepts a 2-D right operand against any number of
leading batch dims, or two equally batched stacks.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from swinkoa import kernels

DTYPE = np.float32

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != DTYPE:
        g = g.astype(DTYPE)
    # never in-place: the same array may be routed to several parents
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``root`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> list[Tensor]:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Intermediate gradients are recomputed from scratch on every call, leaf
    gradients accumulate. Returns the tape that was replayed.
    """
    if grad is None and loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = build_tape(loss)
    for node in tape:
        if node._parents:
            node.grad = None
    seed = np.ones(loss.shape, dtype=DTYPE) if grad is None else np.asarray(grad, dtype=DTYPE)
    _accum(loss, seed)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(a.data**p, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * y))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared across the leading dims of ``a``) or carry the
    same leading dims as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accum(b, a2.T @ g2)

        return _make(out, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")

    def bw_batched(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw_batched)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: _accum(a, g.transpose(inv)))


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    neg = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: _accum(a, np.roll(g, neg, axes)))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        _accum(a, full)

    return _make(a.data[idx], (a,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0; gradients scatter-add back."""
    index = np.asarray(index)

    def bw(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        _accum(table, full)

    return _make(table.data[index], (table,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def mean_pool(x: Tensor, axis: int = -2) -> Tensor:
    """Arithmetic mean over the token axis (``n`` of an ``(..., n, d)`` tensor)."""
    return mean(x, axis=axis)


# ---------------------------------------------------------------------------
# activations and normalisation
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: _accum(x, g * mask))


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form, ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    y, t = kernels.gelu_fwd(x.data)
    return _make(y, (x,), lambda g: _accum(x, kernels.gelu_bwd(g, x.data, t)))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _make(y, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. NaN inputs propagate to NaN outputs."""
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    shp = moved.shape
    y2 = kernels.softmax_fwd(np.ascontiguousarray(moved).reshape(-1, shp[-1]))
    y = np.moveaxis(y2.reshape(shp), -1, axis)

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(-1, shp[-1])
        dx = kernels.softmax_bwd(gm, y2).reshape(shp)
        _accum(x, np.moveaxis(dx, -1, axis))

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``gamma*x + beta``."""
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    x2 = np.ascontiguousarray(x.data).reshape(-1, d)
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def bw(g):
        dx, dgamma, dbeta = kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gamma.data)
        _accum(x, dx.reshape(x.shape))
        _accum(gamma, dgamma)
        _accum(beta, dbeta)

    return _make(y.reshape(x.shape), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` vs 0/1 targets.

    Uses ``max(z,0) - z*t + log1p(exp(-|z|))`` so saturated logits stay finite.
    """
    z = logits.data
    t = np.asarray(targets, dtype=DTYPE)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _make(loss.astype(DTYPE), (logits,), lambda g: _accum(logits, g * (_stable_sigmoid(z) - t)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row softmax cross-entropy, ``-log softmax(logits)[label]``."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels]

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        _accum(logits, d * g[:, None])

    return _make(loss.astype(DTYPE), (logits,), bw)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, index: tuple, h: float = 1e-3) -> float:
    """Central difference of the scalar ``fn()`` w.r.t. ``param.data[index]``."""
    orig = param.data[index].copy()
    with no_grad():
        param.data[index] = orig + h
        fp = float(fn().data.astype(np.float64).sum())
        param.data[index] = orig - h
        fm = float(fn().data.astype(np.float64).sum())
    param.data[index] = orig
    return (fp - fm) / (2.0 * h)


def sample_indices(params: Iterable[Tensor], n: int, rng: np.random.Generator) -> list[tuple[Tensor, tuple]]:
    """Draw ``n`` (parameter, element index) pairs, one parameter tensor at a time."""
    params = list(params)
    picks = []
    for k in range(n):
        p = params[k % len(params)] if k < len(params) else params[int(rng.integers(len(params)))]
        flat = int(rng.integers(p.size))
        picks.append((p, np.unravel_index(flat, p.shape)))
    return picks
