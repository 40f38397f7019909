"""Reverse-mode automatic differentiation over dense numpy arrays.

Every learnable component in the package is expressed through the ops in
this module. Forward results are recorded on an explicit GradientTape;
replaying the tape in reverse execution order accumulates gradients into
every tensor that requires them.

Training runs in float32. Gradient-check suites switch the whole stack to
float64 via set_default_dtype / default_dtype.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_TLS = threading.local()


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the global float width (used by grad-check suites)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Dense n-d array plus gradient slot.

    data is row-major and immutable by convention once produced by a forward
    op. requires_grad marks tensors that should receive gradients when a
    tape is replayed.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GradientTape:
    """Ordered record of differentiable ops for one forward pass.

    Single-owner: a tape must not be shared across threads. Entering the
    context makes it the active tape for the current thread; ops executed
    while active append themselves in execution order.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._output_ids: set[int] = set()
        self._consumed = False

    def __enter__(self):
        stack = getattr(_TLS, "stack", None)
        if stack is None:
            stack = _TLS.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.stack.pop()
        return False

    def _append(self, node: _Node) -> None:
        self._nodes.append(node)
        self._output_ids.add(id(node.output))

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor.

        Walks the tape in exact reverse execution order. If params is given,
        any listed tensor left without a gradient (unused in the forward)
        gets an explicit zero gradient.
        """
        if self._consumed:
            raise RuntimeError("tape already replayed; run a new forward pass")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        if id(loss) not in self._output_ids:
            raise ValueError("loss is detached: it was not produced on this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.backward_fn(out_grad)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g
        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)


def active_tape() -> GradientTape | None:
    stack = getattr(_TLS, "stack", None)
    return stack[-1] if stack else None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape._append(_Node(inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the pre-broadcast shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(og):
        return _unbroadcast(og, a.data.shape), _unbroadcast(og, b.data.shape)

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(og):
        return _unbroadcast(og, a.data.shape), _unbroadcast(-og, b.data.shape)

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(og):
        return (
            _unbroadcast(og * b.data, a.data.shape),
            _unbroadcast(og * a.data, b.data.shape),
        )

    return _record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)

    def bw(og):
        return (
            _unbroadcast(og / b.data, a.data.shape),
            _unbroadcast(-og * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda og: (-og,))


def pow_scalar(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = Tensor(a.data**p)

    def bw(og):
        return (og * p * a.data ** (p - 1.0),)

    return _record(out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda og: (og * out.data,))


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    k = math.sqrt(2.0 / math.pi)
    x2 = x * x
    inner = k * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bw(og):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * k * (1.0 + 3.0 * 0.044715 * x2)
        return (og * d,)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(og):
        ga = og @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ og
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda og: (og.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda og: (og.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    return _record(out, (a,), lambda og: (_unbroadcast(og, a.data.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(og):
        return tuple(np.split(og, splits, axis=axis))

    return _record(out, tuple(ts), bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice length entries along axis starting at start."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def bw(og):
        g = np.zeros_like(a.data)
        g[idx] = og
        return (g,)

    return _record(out, (a,), bw)


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select rows (or slices) of a by integer index along axis."""
    a = _as_tensor(a)
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ValueError("gather indices must be integers")
    out = Tensor(np.take(a.data, indices, axis=axis))

    def bw(og):
        g = np.zeros_like(a.data)
        np.add.at(g, (slice(None),) * axis + (indices,), og)
        return (g,)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(og):
        if axis is None:
            return (np.broadcast_to(og, a.data.shape).copy(),)
        g = og if keepdims else np.expand_dims(og, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]

    def bw(og):
        if axis is None:
            return (np.broadcast_to(og, a.data.shape).copy() / count,)
        g = og if keepdims else np.expand_dims(og, axis)
        return (np.broadcast_to(g, a.data.shape).copy() / count,)

    return _record(out, (a,), bw)


def max_reduce(a, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first maximal element."""
    a = _as_tensor(a)
    out_data = a.data.max(axis=axis)
    out = Tensor(out_data)
    hit = a.data == np.expand_dims(out_data, axis)
    first = np.cumsum(hit, axis=axis) == 1
    mask = (hit & first).astype(a.data.dtype)

    def bw(og):
        return (mask * np.expand_dims(og, axis),)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# neural-net primitives


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(og):
        dot = (og * y).sum(axis=axis, keepdims=True)
        return (y * (og - dot),)

    return _record(out, (a,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gain and shift by bias.

    Constant rows normalize to zero (the eps in the denominator absorbs the
    zero variance), so their output is exactly the bias.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    if eps < 0:
        raise ValueError("layer_norm eps must be >= 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(og):
        dxhat = og * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(og.ndim - 1))
        dgain = (og * xhat).sum(axis=axes)
        dbias = og.sum(axis=axes)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay.

    Decay multiplies each parameter by (1 - lr * weight_decay) before the
    Adam update, so a zero gradient still shrinks the weights.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 5e-2,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        """Apply one update. grads defaults to each parameter's .grad."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match parameter shape {p.data.shape}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * mhat / (
                np.sqrt(vhat) + self.eps
            )
