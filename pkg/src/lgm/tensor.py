"""Dense float64 tensors with a reverse-mode differentiation tape.

Every operation takes and returns :class:`Tensor` objects.  While a
:class:`Tape` is active, operations whose inputs require gradients are
recorded on it; :func:`backward` then replays the tape in reverse.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = sum(exp(w))
    >>> grads = backward(loss)
    >>> grads[w]
    array([2.71828183, 7.3890561 ])
"""
from __future__ import annotations

import itertools
import string
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "TapeConsumedError",
    "as_tensor", "backward",
    "elementwise", "add", "sub", "mul", "neg", "exp", "log", "relu",
    "sum", "reshape", "transpose", "broadcast_to", "expand_dims", "take_label", "where_mask",
    "einsum", "contract",
    "softmax_star", "logsumexp_star", "relu_max_star",
    "unfold", "fold", "unfold_output_shape",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinite values."""


class TapeConsumedError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes are not supported.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False

    def __enter__(self):
        if _ACTIVE:
            raise RuntimeError("a tape is already active")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, out, inputs, vjp):
        if self.consumed:
            raise TapeConsumedError("cannot record on a consumed tape")
        out._tape = self
        self.entries.append((out, inputs, vjp))


class Tensor:
    """Immutable n-dimensional array of 64-bit floats."""

    __slots__ = ("data", "requires_grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr):
        # internal constructor: no copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced non-finite values")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

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
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_arr, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor._wrap(out_arr)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> dict:
    """Reverse pass from a scalar ``loss``.

    Returns a dict mapping every leaf tensor with ``requires_grad`` that
    contributed to ``loss`` to its gradient array.  The tape is consumed.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            return {loss: np.ones(())}
        raise ValueError("loss was not recorded on a tape")
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward")
    grads = {id(loss): np.ones(())}
    leaves = {}
    for out, inputs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._tape is None:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape.consumed = True
    tape.entries.clear()
    return {leaf: np.asarray(grads[k], dtype=np.float64) for k, leaf in leaves.items()}


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_UNARY = {"neg": neg, "exp": exp, "log": log, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch one of add, sub, mul, neg, exp, log, relu by name."""
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        try:
            np.broadcast_shapes(np.shape(as_tensor(a).data), np.shape(as_tensor(b).data))
        except ValueError as e:
            raise ValueError(f"incompatible shapes for {op}") from e
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown op {op!r}")


def where_mask(mask, a, b) -> Tensor:
    """``a`` where the boolean ``mask`` holds, else ``b``; mask is constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _emit(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ------------------------------------------------------------------ structural

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit(y, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _emit(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return _emit(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(a.shape),))


def take_label(a, index, axis) -> Tensor:
    """Select one entry along ``axis`` per position given by the int array ``index``.

    ``index`` has the shape of ``a`` without ``axis`` (broadcastable); the
    result drops ``axis``.
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    index = np.asarray(index)
    out_shape = np.broadcast_shapes(a.shape[:axis] + a.shape[axis + 1:], index.shape)
    pos = len(out_shape) - (a.ndim - 1 - axis)
    idx = np.expand_dims(np.broadcast_to(index, out_shape), pos)
    full_shape = out_shape[:pos] + (a.shape[axis],) + out_shape[pos:]
    src = np.broadcast_to(a.data, full_shape)
    y = np.take_along_axis(src, idx, pos).squeeze(pos)

    def vjp(g):
        ga = np.zeros(full_shape)
        np.put_along_axis(ga, idx, np.expand_dims(g, pos), pos)
        return (_unbroadcast(ga, a.shape),)

    return _emit(y, (a,), vjp)


# ----------------------------------------------------------------- contraction

def _einsum_vjp(spec_a, spec_b, spec_out, a, b):
    def grad_for(target_spec, other_spec, other, target_shape):
        keep = "".join(c for c in target_spec if c in spec_out or c in other_spec)

        def f(g):
            r = np.einsum(f"{spec_out},{other_spec}->{keep}", g, other)
            # axes summed out of the target alone get a broadcast gradient
            r = r.reshape(tuple(n if c in keep else 1 for c, n in zip(target_spec, target_shape)))
            return np.broadcast_to(r, target_shape)

        return f

    ga = grad_for(spec_a, spec_b, b.data, a.shape)
    gb = grad_for(spec_b, spec_a, a.data, b.shape)
    return lambda g: (ga(g), gb(g))


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``"ij,jk->ik"``."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, spec_out = subscripts.replace(" ", "").split("->")
    spec_a, spec_b = lhs.split(",")
    if len(set(spec_a)) != len(spec_a) or len(set(spec_b)) != len(spec_b):
        raise ValueError("repeated indices within one operand are not supported")
    for c in set(spec_a) & set(spec_b):
        if a.shape[spec_a.index(c)] != b.shape[spec_b.index(c)]:
            raise ValueError(f"extent mismatch on index {c!r}")
    y = np.einsum(subscripts, a.data, b.data)
    return _emit(y, (a, b), _einsum_vjp(spec_a, spec_b, spec_out, a, b))


def contract(a, b, dims) -> Tensor:
    """Tensor contraction over paired axes ``dims = (axes_a, axes_b)``.

    Output axes are the free axes of ``a`` followed by those of ``b``,
    as in :func:`numpy.tensordot`.
    """
    a, b = as_tensor(a), as_tensor(b)
    axes_a, axes_b = (list(d) for d in dims)
    if len(axes_a) != len(axes_b):
        raise ValueError("dims must pair the same number of axes")
    letters = iter(string.ascii_letters)
    sa = [next(letters) for _ in range(a.ndim)]
    sb = [next(letters) for _ in range(b.ndim)]
    for i, j in zip(axes_a, axes_b):
        if a.shape[i] != b.shape[j]:
            raise ValueError(f"extent mismatch: axis {i} ({a.shape[i]}) vs axis {j} ({b.shape[j]})")
        sb[j] = sa[i]
    paired = {sa[i] for i in axes_a}
    out = [c for c in sa if c not in paired] + [c for c in sb if c not in paired]
    return einsum(f"{''.join(sa)},{''.join(sb)}->{''.join(out)}", a, b)


# ------------------------------------------------------ implicit-label reductions

def _star_shift(x, axis):
    return np.maximum(x.max(axis=axis, keepdims=True), 0.0)


def softmax_star(x, axis=-1) -> Tensor:
    """Softmax over ``axis`` with an extra implicit entry fixed at 0.

    Returns the probabilities of the explicit entries only; the implicit
    label's probability is one minus their sum.
    """
    x = as_tensor(x)
    shift = _star_shift(x.data, axis)
    e = np.exp(x.data - shift)
    y = e / (np.exp(-shift) + e.sum(axis=axis, keepdims=True))

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), vjp)


def logsumexp_star(x, axis=-1) -> Tensor:
    """``log(1 + sum(exp(x)))`` along ``axis``, which is reduced."""
    x = as_tensor(x)
    shift = _star_shift(x.data, axis)
    e = np.exp(x.data - shift)
    z = np.exp(-shift) + e.sum(axis=axis, keepdims=True)
    y = (np.log(z) + shift).squeeze(axis)
    p = e / z
    return _emit(y, (x,), lambda g: (np.expand_dims(g, axis) * p,))


def relu_max_star(x, axis=-1) -> Tensor:
    """``max(0, max(x))`` along ``axis``; ties go to the lowest label (implicit first)."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    top = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)
    explicit_wins = top > 0
    y = np.where(explicit_wins, top, 0.0)

    def vjp(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, np.expand_dims(arg, axis),
                          np.expand_dims(np.where(explicit_wins, g, 0.0), axis), axis)
        return (gx,)

    return _emit(y, (x,), vjp)


# ----------------------------------------------------------------- patch gather

def unfold_output_shape(spatial, kernel, stride, dilation):
    out = []
    for s, k, st, d in zip(spatial, kernel, stride, dilation):
        span = d * (k - 1) + 1
        if span > s:
            raise ValueError(f"kernel {k} with dilation {d} does not fit input extent {s}")
        out.append((s - span) // st + 1)
    return tuple(out)


def _patch_slices(offset, out_shape, stride, dilation):
    return tuple(slice(k * d, k * d + st * (o - 1) + 1, st)
                 for k, o, st, d in zip(offset, out_shape, stride, dilation))


def _unfold_array(x, start, kernel, stride, dilation):
    nd = len(kernel)
    spatial = x.shape[start:start + nd]
    out_sp = unfold_output_shape(spatial, kernel, stride, dilation)
    lead, trail = x.shape[:start], x.shape[start + nd:]
    out = np.empty(lead + tuple(kernel) + out_sp + trail)
    pre = (slice(None),) * start
    for off in itertools.product(*(range(k) for k in kernel)):
        out[pre + off] = x[pre + _patch_slices(off, out_sp, stride, dilation)]
    return out


def _fold_array(y, start, spatial, kernel, stride, dilation):
    nd = len(kernel)
    out_sp = y.shape[start + nd:start + 2 * nd]
    lead, trail = y.shape[:start], y.shape[start + 2 * nd:]
    out = np.zeros(lead + tuple(spatial) + trail)
    pre = (slice(None),) * start
    for off in itertools.product(*(range(k) for k in kernel)):
        out[pre + _patch_slices(off, out_sp, stride, dilation)] += y[pre + off]
    return out


def unfold(x, kernel, stride=None, dilation=None, start_axis=0) -> Tensor:
    """Gather sliding patches without padding.

    The ``len(kernel)`` spatial axes beginning at ``start_axis`` are replaced
    by kernel-offset axes followed by output-position axes.
    """
    x = as_tensor(x)
    kernel = tuple(kernel)
    stride = tuple(stride or (1,) * len(kernel))
    dilation = tuple(dilation or (1,) * len(kernel))
    start = start_axis % x.ndim
    spatial = x.shape[start:start + len(kernel)]
    y = _unfold_array(x.data, start, kernel, stride, dilation)
    return _emit(y, (x,), lambda g: (_fold_array(g, start, spatial, kernel, stride, dilation),))


def fold(y, spatial, kernel, stride=None, dilation=None, start_axis=0) -> Tensor:
    """Scatter-add patches back onto a grid of shape ``spatial``; adjoint of :func:`unfold`."""
    y = as_tensor(y)
    kernel = tuple(kernel)
    stride = tuple(stride or (1,) * len(kernel))
    dilation = tuple(dilation or (1,) * len(kernel))
    start = start_axis % y.ndim
    x = _fold_array(y.data, start, tuple(spatial), kernel, stride, dilation)
    return _emit(x, (y,), lambda g: (_unfold_array(g, start, kernel, stride, dilation),))
