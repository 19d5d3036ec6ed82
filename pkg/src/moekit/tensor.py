"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient tape entry.
Every op records a backward closure; ``Tensor.backward()`` walks the tape
in reverse topological order and accumulates gradients into ``.grad``.

Two working precisions are supported: wide (float64, the default, used by
oracles and tests) and narrow (float32, used by toy training runs).
Tensors are treated as immutable after construction except for gradient
accumulation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

WIDE = np.float64
NARROW = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(WIDE)
    return arr


class Tensor:
    """A dense n-dimensional array node on a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- node construction -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[], None] | None) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A leaf sharing this tensor's values, off the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward pass ------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate gradients of this node into every upstream leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() from a non-scalar requires an explicit grad")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"grad shape {grad.shape} != value shape {self.data.shape}")
        if not self.requires_grad:
            return
        # Iterative post-order: children appear before parents in `topo`,
        # so the reversed walk applies the chain rule outputs-first.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        other = _as_tensor(other)
        return mul(self, pow_(other, -1.0))

    def __rtruediv__(self, other):
        return mul(other, pow_(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, axis0: int = -2, axis1: int = -1):
        return transpose(self, axis0, axis1)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward():
        g = out.grad
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    out = Tensor._node(data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward():
        g = out.grad
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    out = Tensor._node(data, (a, b), backward)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on the leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from exc

    def backward():
        g = out.grad
        a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    out = Tensor._node(data, (a, b), backward)
    return out


def transpose(a, axis0: int = -2, axis1: int = -1) -> Tensor:
    a = _as_tensor(a)
    data = np.swapaxes(a.data, axis0, axis1)

    def backward():
        a._accum(np.swapaxes(out.grad, axis0, axis1))

    out = Tensor._node(data, (a,), backward)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc

    def backward():
        a._accum(out.grad.reshape(a.shape))

    out = Tensor._node(data, (a,), backward)
    return out


def take(a, key) -> Tensor:
    """Numpy basic/advanced indexing; backward scatter-adds into the source."""
    a = _as_tensor(a)
    data = np.array(a.data[key])

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, key, out.grad)
        a._accum(g)

    out = Tensor._node(data, (a,), backward)
    return out


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat: incompatible shapes") from exc
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward():
        pieces = np.split(out.grad, splits, axis=axis)
        for t, piece in zip(ts, pieces):
            t._accum(piece)

    out = Tensor._node(data, tuple(ts), backward)
    return out


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full_like(a.data, g))

    out = Tensor._node(np.asarray(data), (a,), backward)
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def pow_(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data ** exponent

    def backward():
        a._accum(out.grad * exponent * a.data ** (exponent - 1.0))

    out = Tensor._node(data, (a,), backward)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward():
        a._accum(out.grad * data)

    out = Tensor._node(data, (a,), backward)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward():
        a._accum(out.grad / a.data)

    out = Tensor._node(data, (a,), backward)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward():
        a._accum(out.grad * data * (1.0 - data))

    out = Tensor._node(data, (a,), backward)
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x), the gating nonlinearity used by the expert FFNs."""
    a = _as_tensor(a)
    return mul(a, sigmoid(a))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accum((g - dot) * data)

    out = Tensor._node(data, (a,), backward)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward():
        g = out.grad
        soft = np.exp(data)
        a._accum(g - soft * g.sum(axis=axis, keepdims=True))

    out = Tensor._node(data, (a,), backward)
    return out


def rmsnorm(x, gain, eps: float) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps) * gain."""
    if eps <= 0:
        raise ValueError("rmsnorm eps must be > 0")
    x = _as_tensor(x)
    ms = mean(mul(x, x), axis=-1, keepdims=True)
    inv = pow_(add(ms, eps), -0.5)
    return mul(mul(x, inv), gain)


def embedding(table, ids) -> Tensor:
    """Row lookup into `table` (vocab, dim) by an integer id array."""
    table = _as_tensor(table)
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")

    data = table.data[idx]

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, idx.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        table._accum(g)

    out = Tensor._node(data, (table,), backward)
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer `targets` under `logits`.

    `logits` has shape (..., vocab); `targets` the matching leading shape.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets).reshape(-1)
    vocab = logits.shape[-1]
    x = logits.data.reshape(-1, vocab)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {x.shape[0]} rows")
    if t.size == 0:
        raise ShapeError("cross_entropy: empty batch")
    if t.min() < 0 or t.max() >= vocab:
        raise IndexError(f"cross_entropy target out of range [0, {vocab})")
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    rows = np.arange(x.shape[0])
    nll = lse[:, 0] - x[rows, t]
    data = np.asarray(nll.mean())

    def backward():
        soft = np.exp(x - lse)
        soft[rows, t] -= 1.0
        logits._accum((out.grad * soft / x.shape[0]).reshape(logits.shape))

    out = Tensor._node(data, (logits,), backward)
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient routes to the smaller operand (ties to `a`)."""
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data
    data = np.where(pick_a, a.data, b.data)

    def backward():
        g = out.grad
        a._accum(_unbroadcast(g * pick_a, a.shape))
        b._accum(_unbroadcast(g * ~pick_a, b.shape))

    out = Tensor._node(data, (a, b), backward)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero gradient outside the open interval."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward():
        a._accum(out.grad * inside)

    out = Tensor._node(data, (a,), backward)
    return out


def stack_scalars(scalars: Sequence[Tensor]) -> Tensor:
    """Stack 0-d tensors into a 1-d tensor (used for per-sequence losses)."""
    return concat([reshape(s, (1,)) for s in scalars], axis=0)


def scatter_rows(values, index, length: int) -> Tensor:
    """Place `values` rows at positions `index` of a zero (length, ...) tensor."""
    values = _as_tensor(values)
    idx = np.asarray(index)
    data = np.zeros((length,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(data, idx, values.data)

    def backward():
        values._accum(out.grad[idx])

    out = Tensor._node(data, (values,), backward)
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a single tensor to a scalar. Relative error per coordinate
    is |analytic - fd| / max(|analytic|, |fd|, 1e-12); the max over all
    coordinates is returned. Wide precision is assumed.
    """
    base = np.array(x.data, dtype=WIDE)
    leaf = Tensor(base.copy(), requires_grad=True)
    y = f(leaf)
    if y.data.size != 1:
        raise ShapeError("grad_check target must be scalar")
    if not np.isfinite(y.data).all():
        raise NumericError("grad_check: non-finite function value")
    y.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    if not np.isfinite(analytic).all():
        raise NumericError("grad_check: non-finite analytic gradient")

    flat = base.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base.copy())).item()
        flat[i] = orig - eps
        lo = f(Tensor(base.copy())).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * eps)
    if not np.isfinite(fd).all():
        raise NumericError("grad_check: non-finite finite-difference gradient")
    an = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-12)
    return float(np.max(np.abs(an - fd) / denom))


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                      eps: float = 1e-5) -> float:
    """grad_check over a named parameter tree: max relative error anywhere.

    `loss_fn` closes over `params` and returns a scalar loss built from them.
    """
    y = loss_fn()
    if not np.isfinite(y.data).all():
        raise NumericError("grad_check_params: non-finite loss")
    for p in params.values():
        p.zero_grad()
    y.backward()
    worst = 0.0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            an = analytic.reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
            worst = max(worst, rel)
    return worst
