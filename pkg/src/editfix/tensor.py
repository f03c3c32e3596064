"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Exactly the operations the repair model needs, nothing more. Tensors wrap a
numpy array; ops record a backward closure when gradients are enabled and any
input requires them. Gradients accumulate additively across uses, so a second
``backward`` without zeroing doubles them (documented behavior). Double
precision is used by the gradient-check tests, single precision by training.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Incompatible operand shapes; the message names both."""


class AutodiffError(RuntimeError):
    """Misuse of the autodiff API (non-scalar backward, terminal states, ...)."""


class NumericError(ArithmeticError):
    """NaN or infinity where a finite value is required."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

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
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Sugar; every method delegates to the module-level op.
    def __add__(self, other):
        return add(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named tensor registered in a model; checkpoints address it by name."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._bwd = bwd
        return out
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating ``grad`` on all reachable
    tensors that require gradients."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add. ``b`` may be a trailing-shape broadcast (bias add)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape} (only trailing broadcast allowed)")
    lead = a.ndim - b.ndim

    def bwd(g):
        _accum(a, g)
        _accum(b, g.sum(axis=tuple(range(lead))) if lead else g)

    return _result(a.data + b.data, (a, b), bwd)


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or constant array; no gradient flows to ``c``."""
    c = np.asarray(c)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"scale: constant {c.shape} does not broadcast within {a.shape}")

    def bwd(g):
        _accum(a, g * c)

    return _result(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: equal-rank stacked matmul, or any-rank ``a`` times 2D ``b``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    if b.ndim == 2:
        def bwd(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

        return _result(a.data @ b.data, (a, b), bwd)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = np.ascontiguousarray(a.data.reshape(-1))
    y = _kernels.gelu(x).reshape(a.shape)

    def bwd(g):
        _accum(a, _kernels.gelu_bwd(x, np.ascontiguousarray(g.reshape(-1))).reshape(a.shape))

    return _result(y, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs feature dim {h}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, h))
    y2, xhat, rstd = _kernels.layernorm_rows(x2, gain.data, bias.data, eps)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, h))
        gx, ggain, gbias = _kernels.layernorm_rows_bwd(xhat, rstd, gain.data, g2)
        _accum(x, gx.reshape(x.shape))
        _accum(gain, ggain)
        _accum(bias, gbias)

    return _result(y2.reshape(x.shape), (x, gain, bias), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rows of all -inf are not allowed."""
    moved = np.moveaxis(x.data, axis, -1)
    shp = moved.shape
    y2 = _kernels.softmax_rows(np.ascontiguousarray(moved.reshape(-1, shp[-1])))
    y = np.moveaxis(y2.reshape(shp), -1, axis)

    def bwd(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, shp[-1]))
        gx2 = _kernels.softmax_rows_bwd(y2, g2)
        _accum(x, np.moveaxis(gx2.reshape(shp), -1, axis))

    return _result(y, (x,), bwd)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` (a constant bool array) is True by ``value``."""
    mask = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(x.shape, mask.shape) != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast within {x.shape}")

    def bwd(g):
        _accum(x, np.where(mask, 0.0, g).astype(g.dtype, copy=False))

    return _result(np.where(mask, np.asarray(value, dtype=x.dtype), x.data), (x,), bwd)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2D table; backward scatter-adds into the table."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_gather: table must be 2D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_gather: ids outside 0..{table.shape[0] - 1}")
    out = table.data[ids.reshape(-1)].reshape(ids.shape + (table.shape[1],))

    def bwd(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        _kernels.embedding_grad(
            table.grad, ids.reshape(-1), np.ascontiguousarray(g.reshape(-1, table.shape[1]))
        )

    return _result(out, (table,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        off = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(off, off + s)
            _accum(t, g[tuple(idx)])
            off += s

    return _result(data, tuple(tensors), bwd)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); backward scatters into zeros."""
    out = x.data[key]

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[key] += g

    return _result(np.array(out, copy=True), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g):
        _accum(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _result(np.transpose(x.data, axes), (x,), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross entropy ``-log softmax(logits)[target]``.

    2D logits with a vector of target indices give a vector of losses; 1D
    logits with an integer target give a scalar.
    """
    squeeze = logits.ndim == 1
    l2 = logits.data.reshape(1, -1) if squeeze else logits.data
    if l2.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 1D or 2D, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != l2.shape[0]:
        raise ShapeError(f"cross_entropy: {l2.shape[0]} rows vs {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= l2.shape[1]):
        raise ShapeError(f"cross_entropy: target outside 0..{l2.shape[1] - 1}")
    # -inf entries are legal (masked classes); NaN and +inf are not.
    if np.isnan(l2).any() or (l2 == np.inf).any():
        raise NumericError("cross_entropy: logits contain NaN or +infinity")
    if (l2[np.arange(t.shape[0]), t] == -np.inf).any():
        raise NumericError("cross_entropy: a target class is masked to -infinity")
    losses, probs = _kernels.cross_entropy_rows(np.ascontiguousarray(l2), t)

    def bwd(g):
        g2 = np.asarray(g).reshape(-1, 1)
        gl = probs * g2
        gl[np.arange(t.shape[0]), t] -= g2[:, 0]
        _accum(logits, gl.reshape(logits.shape))

    out = losses[0].reshape(()) if squeeze else losses
    return _result(out, (logits,), bwd)
