"""Dense float64 tensors with tape-based reverse-mode differentiation.

A module-level tape records every operation whose inputs require gradients;
``backward`` on a scalar loss walks that tape once in reverse, deposits
gradients on the leaves, and consumes the tape. Convolution inner loops are
delegated to :mod:`mpf.kernels`.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError, StateError

Array = np.ndarray


class Tape:
    """Ordered record of operations; creation order is topological order."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.consumed = False


_tape = Tape()
_grad_enabled = True


def _current_tape() -> Tape:
    global _tape
    if _tape.consumed:
        _tape = Tape()
    return _tape


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self) -> None:
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc) -> None:
        global _grad_enabled
        _grad_enabled = self._prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: Array, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._parents = ()
        t._backward = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)


def _record(
    out_data: Array,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[Array], Sequence[Optional[Array]]],
) -> Tensor:
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(out_data, rg)
    if rg:
        out._parents = parents
        out._backward = backward_fn
        tape = _current_tape()
        tape.nodes.append(out)
        out._tape = tape
    return out


def _as_constant(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def _binary(a: Tensor, b, fwd, bwd_a, bwd_b) -> Tensor:
    if isinstance(b, Tensor):
        try:
            out = fwd(a.data, b.data)
        except ValueError as e:
            raise ShapeError(f"operands {a.shape} and {b.shape} do not broadcast") from e
        sa, sb = a.shape, b.shape

        def bw(g: Array):
            ga = _unbroadcast(bwd_a(g, a.data, b.data), sa) if a.requires_grad else None
            gb = _unbroadcast(bwd_b(g, a.data, b.data), sb) if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), bw)

    const = _as_constant(b)
    try:
        out = fwd(a.data, const)
    except ValueError as e:
        raise ShapeError(f"operands {a.shape} and {const.shape} do not broadcast") from e
    sa = a.shape

    def bw_const(g: Array):
        return (_unbroadcast(bwd_a(g, a.data, const), sa),)

    return _record(out, (a,), bw_const)


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b) -> Tensor:
    divisor = b.data if isinstance(b, Tensor) else _as_constant(b)
    if np.any(divisor == 0.0):
        raise DomainError("division by zero")
    return _binary(
        a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def _unary(a: Tensor, out_data: Array, grad_local: Array) -> Tensor:
    return _record(out_data, (a,), lambda g: (g * grad_local,))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _unary(a, out, (a.data > 0.0).astype(np.float64))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _unary(a, out, 1.0 - out * out)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, out, out * (1.0 - out))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow")
    return _unary(a, out, out)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _unary(a, np.log(a.data), 1.0 / a.data)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _unary(a, out, 0.5 / out)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_ELEMENTWISE_UNARY = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by op name; binary kinds accept a tensor or scalar second arg."""
    if kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeError(f"elementwise {kind} needs two operands")
        return _ELEMENTWISE_BINARY[kind](a, b)
    if kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ShapeError(f"elementwise {kind} is unary")
        return _ELEMENTWISE_UNARY[kind](a)
    raise ShapeError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# shape / reduction ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {old} to {shape}") from e
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g: Array):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gather(a: Tensor, indices) -> Tensor:
    """Select rows (axis 0). Backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]
    shape = a.shape

    def bw(g: Array):
        acc = np.zeros(shape, dtype=np.float64)
        np.add.at(acc, idx, g)
        return (acc,)

    return _record(out, (a,), bw)


def take_diag(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("take_diag expects a square matrix")
    n = a.shape[0]

    def bw(g: Array):
        acc = np.zeros((n, n), dtype=np.float64)
        np.fill_diagonal(acc, g)
        return (acc,)

    return _record(np.diagonal(a.data).copy(), (a,), bw)


# ---------------------------------------------------------------------------
# matmul / conv / upsample
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g: Array):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Valid cross-correlation; x is (C,H,W) or (N,C,H,W), w is (F,C,k,k)."""
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError("kernels must be (F,C,k,k)")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError("input must be (C,H,W) or (N,C,H,W)")
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {xd.shape[1]}, kernels {w.shape[1]}")
    k = w.shape[2]
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h, wid = xd.shape[2], xd.shape[3]
    if k > h or k > wid:
        raise ShapeError(f"kernel {k} larger than input {h}x{wid}")
    out = kernels.conv2d_forward(xd, w.data, stride)
    xd_kept = xd  # padded copy, reused for the kernel gradient

    def bw(g: Array):
        if squeeze:
            g = g[None]
        gx = None
        if x.requires_grad:
            gp = kernels.conv2d_backward_input(g, w.data, stride, h, wid)
            if pad:
                gp = gp[:, :, pad:-pad, pad:-pad]
            gx = gp[0] if squeeze else gp
        gw = (
            kernels.conv2d_backward_kernels(g, xd_kept, stride, k)
            if w.requires_grad
            else None
        )
        return gx, gw

    return _record(out[0] if squeeze else out, (x, w), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (...,H,W)."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    shape = x.shape

    def bw(g: Array):
        h, w = shape[-2], shape[-1]
        g = g.reshape(shape[:-2] + (h, 2, w, 2))
        return (g.sum(axis=(-3, -1)),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requiring leaf."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")
    tape = loss._tape
    if tape is None:
        raise StateError("loss is not recorded on a tape")
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            node._parents = ()
            node._backward = None
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            else:
                parent.grad = parent.grad + np.asarray(g, dtype=np.float64).reshape(
                    parent.shape
                )
        node.grad = None
        node._parents = ()
        node._backward = None
    tape.nodes.clear()


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment buffers and step counter for a parameter list."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Array],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam update, applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params/grads/state lengths differ")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# small conveniences used across the package
# ---------------------------------------------------------------------------


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a 2-d tensor, max-shifted for stability."""
    m = a.data.max(axis=1, keepdims=True)
    shifted = sub(a, m)
    s = tsum(exp(shifted), axis=1)
    return add(log(s), m[:, 0])


def unit_rows(a: Tensor, *, min_norm: float = 0.0) -> Tensor:
    """Normalize each row of a 2-d tensor to unit euclidean length."""
    sq = tsum(mul(a, a), axis=1, keepdims=True)
    norms = sqrt(sq)
    if np.any(norms.data <= min_norm):
        raise DomainError("row with zero norm cannot be normalized")
    return div(a, norms)


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
