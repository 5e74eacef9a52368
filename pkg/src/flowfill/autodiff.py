"""Minimal reverse-mode automatic differentiation over an explicit tape.

Grids are laid out height x width x channels.  The engine is static-shape:
binary ops require identical shapes, the only broadcasting is against
Python scalars.  Every op appends one record to the tape of its inputs;
:meth:`Tape.backward` walks the records in reverse and accumulates
gradients into ``Tensor.grad``.

Typical use::

    tape = Tape()
    w = tape.param(weights)
    x = tape.constant(image)
    loss = mean(square(conv2d(x, w, b)))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# smoothing inside every square root used for end-point errors
EPS_STAB = 1e-9


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in a tensor or gradient."""


class ShapeError(ValueError):
    pass


class Tensor:
    """A value node on a tape.

    ``data`` is always a numpy array of the tape's dtype.  ``grad`` stays
    ``None`` until a backward pass reaches the tensor (leaf parameters get
    an explicit zero gradient when unreachable).
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "node_id", "name")
    # keep numpy from broadcasting itself over a Tensor operand
    __array_ufunc__ = None

    def __init__(self, data: np.ndarray, tape: "Tape", requires_grad: bool, name: str = ""):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = tape._next_id()
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, id={self.node_id}, grad={self.requires_grad})"

    # operator sugar; all routes go through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    # maps the upstream gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of the operations of one forward pass."""

    dtype: type = np.float32
    check_finite: bool = True
    # test hook: backward rules of these ops are deliberately scaled wrong
    corrupt: frozenset = frozenset()
    records: list[_Record] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    _counter: int = 0

    def _next_id(self) -> int:
        self._counter += 1
        return self._counter

    def _wrap(self, data, requires_grad: bool, name: str = "") -> Tensor:
        arr = np.array(data, dtype=self.dtype, copy=True)
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in input {name or '<tensor>'}")
        t = Tensor(arr, self, requires_grad, name)
        self.leaves.append(t)
        return t

    def param(self, data, name: str = "") -> Tensor:
        """Leaf that receives a gradient."""
        return self._wrap(data, True, name)

    def constant(self, data, name: str = "") -> Tensor:
        return self._wrap(data, False, name)

    def _record(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite output from {op}")
        out = Tensor(data.astype(self.dtype, copy=False), self, any(t.requires_grad for t in inputs))
        if out.requires_grad:
            if op in self.corrupt:
                backward = _corrupted(backward)
            self.records.append(_Record(out, inputs, backward, op))
        return out

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every tensor reachable from ``loss``."""
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for rec in self.records:
            for inp in rec.inputs:
                if inp.node_id >= rec.out.node_id:
                    raise ValueError(f"tape is not topologically ordered at op {rec.op}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=self.dtype).reshape(inp.shape)
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad += gi
        for leaf in self.leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            if self.check_finite and leaf.grad is not None and not np.all(np.isfinite(leaf.grad)):
                raise NonFiniteError(f"non-finite gradient for {leaf.name or leaf!r}")


def _corrupted(backward):
    def wrong(g):
        return [None if gi is None else 1.5 * np.asarray(gi) for gi in backward(g)]

    return wrong


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise algebra ---------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    if np.isscalar(b):
        a = _as_tensor(a, tape)
        return tape._record(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if np.isscalar(a):
        return add(b, a)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same_shape(a, b, "add")
    return tape._record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    if np.isscalar(b):
        a = _as_tensor(a, tape)
        return tape._record(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    if np.isscalar(a):
        b = _as_tensor(b, tape)
        return tape._record(a - b.data, (b,), lambda g: (-g,), "rsub_scalar")
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same_shape(a, b, "sub")
    return tape._record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a Python scalar."""
    tape = _tape_of(a, b)
    if np.isscalar(a):
        a, b = b, a
    if np.isscalar(b):
        a = _as_tensor(a, tape)
        s = float(b)
        return tape._record(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return tape._record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def absolute(x: Tensor) -> Tensor:
    # np.sign(0) == 0 gives the zero subgradient at the kink
    xd = x.data
    return x.tape._record(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape._record(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x: Tensor, eps: float = EPS_STAB) -> Tensor:
    """``sqrt(x + eps)``; the default eps keeps the gradient finite at 0."""
    xd = x.data.astype(np.float64)
    if np.any(xd + eps < 0):
        raise ValueError("sqrt of negative value")
    y = np.sqrt(xd + eps)
    return x.tape._record(y, (x,), lambda g: (g * (0.5 / y),), "sqrt")


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Sum over all elements, or over one axis (which is dropped)."""
    shape = x.shape
    # 64-bit partial sums; image-sized reductions drift at 32-bit
    out = np.sum(x.data, axis=axis, dtype=np.float64)
    if axis is None:
        return x.tape._record(np.asarray(out), (x,), lambda g: (np.full(shape, g.reshape(()), dtype=np.float64),), "sum")
    ax = axis % len(shape)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape),)

    return x.tape._record(out, (x,), back, "sum_axis")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum(x), 1.0 / n)


def get_slice(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters back into zeros."""
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return x.tape._record(np.ascontiguousarray(x.data[index]), (x,), back, "slice")


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    xd = x.data
    neg = xd <= 0
    ex = np.exp(np.minimum(xd, 0))
    y = np.where(neg, ex - 1.0, xd)
    # derivative: 1 on the positive side, e^x on the other
    return x.tape._record(y, (x,), lambda g: (g * np.where(neg, ex, 1.0),), "elu")


# -- convolution -----------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded patches of an h x w x c grid, shape (h*w, k*k*c).

    Column order is (dy, dx, c), matching a k x k x c_in x c_out kernel
    reshaped to (k*k*c_in, c_out).
    """
    h, w, c = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    s0, s1, s2 = xp.strides
    patches = np.lib.stride_tricks.as_strided(xp, shape=(h, w, k, k, c), strides=(s0, s1, s0, s1, s2), writeable=False)
    return patches.reshape(h * w, k * k * c)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation with zero padding (no autodiff)."""
    k, k2, cin, cout = kernel.shape
    h, w, c = x.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if c != cin:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    if k == 1:
        out = x.reshape(h * w, c) @ kernel.reshape(cin, cout)
    else:
        out = _im2col(x, k) @ kernel.reshape(k * k * cin, cout)
    out += bias
    return out.reshape(h, w, cout)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-size 2-D convolution (cross-correlation) with zero padding.

    ``x`` is h x w x c_in, ``kernel`` k x k x c_in x c_out with odd k and
    ``bias`` has c_out entries.
    """
    tape = _tape_of(x, kernel, bias)
    x, kernel, bias = (_as_tensor(t, tape) for t in (x, kernel, bias))
    xd, kd = x.data, kernel.data
    if tape.check_finite and not np.all(np.isfinite(xd)):
        raise NonFiniteError("non-finite conv2d input")
    k, _, cin, cout = kd.shape
    h, w, _ = xd.shape
    out = conv2d_forward(xd, kd, bias.data)

    def back(g):
        g2 = g.reshape(h * w, cout)
        gb = g2.sum(axis=0, dtype=np.float64)
        gk = gx = None
        if kernel.requires_grad:
            cols = xd.reshape(h * w, cin) if k == 1 else _im2col(xd, k)
            gk = (cols.T @ g2).reshape(kd.shape)
        if x.requires_grad:
            # input gradient is a full correlation with the flipped, transposed kernel
            flipped = np.ascontiguousarray(kd[::-1, ::-1].transpose(0, 1, 3, 2))
            gx = conv2d_forward(np.ascontiguousarray(g), flipped, np.zeros(cin, dtype=g.dtype))
        return gx, gk, gb

    return tape._record(out, (x, kernel, bias), back, "conv2d")


def conv2d_naive(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct quadruple-loop reference convolution, float64 accumulation."""
    k = kernel.shape[0]
    h, w, cin = x.shape
    cout = kernel.shape[3]
    p = (k - 1) // 2
    out = np.zeros((h, w, cout), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for dy in range(k):
                yi = i + dy - p
                if yi < 0 or yi >= h:
                    continue
                for dx in range(k):
                    xj = j + dx - p
                    if xj < 0 or xj >= w:
                        continue
                    out[i, j] += x[yi, xj].astype(np.float64) @ kernel[dy, dx].astype(np.float64)
    return out + bias


__all__ = [
    "EPS_STAB",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "absolute",
    "add",
    "conv2d",
    "conv2d_forward",
    "conv2d_naive",
    "elu",
    "get_slice",
    "mean",
    "mul",
    "sqrt",
    "square",
    "sub",
    "sum",
]
