"""Reverse-mode automatic differentiation on dense numpy arrays.

A ``Tape`` records every differentiable operation executed while it is
active; ``Tape.backward`` replays the record in reverse execution order
exactly once and accumulates gradients into ``Tensor.grad``. Tapes are
built per forward pass and discarded after backward.

Arrays are float32 by default (parameters/activations); reductions
accumulate in float64 before casting back. Tensors created from float64
data stay float64, which is what the finite-difference checks use.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError

_TAPE_STACK: list["Tape"] = []

LEAKY_SLOPE = 0.2


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense n-dimensional array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Same values, severed from any tape."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._entries = []  # (output tensor, backprop fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, out, backprop):
        out.requires_grad = True
        self._entries.append((out, backprop))

    def backward(self, loss):
        """Accumulate d(loss)/dt into t.grad for every recorded tensor.

        Repeated calls without zeroing add their contributions.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {loss.data.shape}"
            )
        adjoint = {id(loss): np.ones_like(loss.data)}
        tensors = {id(loss): loss}
        for out, backprop in reversed(self._entries):
            g = adjoint.pop(id(out), None)
            tensors.setdefault(id(out), out)
            if g is None:
                continue
            # flush the output's own share before propagating
            out.grad = g if out.grad is None else out.grad + g
            for t, contrib in backprop(g):
                if not t.requires_grad:
                    continue
                tensors.setdefault(id(t), t)
                prev = adjoint.get(id(t))
                adjoint[id(t)] = contrib if prev is None else prev + contrib
        for tid, g in adjoint.items():  # leaves (and the loss if it is one)
            t = tensors[tid]
            t.grad = g if t.grad is None else t.grad + g


def backward(loss):
    """Backward through the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward() called with no active tape")
    tape.backward(loss)


def _maybe_record(out, inputs, backprop):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, backprop)
    return out


def _unbroadcast(grad, shape):
    """Sum a gradient over axes that were broadcast to produce it."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as e:
        raise ShapeError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from e


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def backprop(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _maybe_record(out, (a, b), backprop)


def sub(a, b):
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backprop(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _maybe_record(out, (a, b), backprop)


def mul(a, b):
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backprop(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _maybe_record(out, (a, b), backprop)


def div(a, b):
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        idx = tuple(int(i) for i in np.argwhere(b.data == 0)[0])
        raise NumericError("div: zero divisor", index=idx)
    out = Tensor(a.data / b.data)

    def backprop(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        )

    return _maybe_record(out, (a, b), backprop)


def neg(a):
    out = Tensor(-a.data)
    return _maybe_record(out, (a,), lambda g: ((a, -g),))


def relu(a):
    mask = a.data > 0
    out = Tensor(a.data * mask)
    return _maybe_record(out, (a,), lambda g: ((a, g * mask),))


def leaky_relu(a, slope=LEAKY_SLOPE):
    factor = np.where(a.data > 0, a.data.dtype.type(1), a.data.dtype.type(slope))
    out = Tensor(a.data * factor)
    return _maybe_record(out, (a,), lambda g: ((a, g * factor),))


def tanh(a):
    t = np.tanh(a.data)
    out = Tensor(t)
    return _maybe_record(out, (a,), lambda g: ((a, g * (1 - t * t)),))


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    s = s.astype(a.data.dtype, copy=False)
    out = Tensor(s)
    return _maybe_record(out, (a,), lambda g: ((a, g * (s * (1 - s))),))


def absolute(a):
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)
    return _maybe_record(out, (a,), lambda g: ((a, g * sign),))


def square(a):
    out = Tensor(a.data * a.data)
    return _maybe_record(out, (a,), lambda g: ((a, g * 2 * a.data),))


def sqrt(a):
    if np.any(a.data < 0):
        idx = tuple(int(i) for i in np.argwhere(a.data < 0)[0])
        raise NumericError("sqrt: negative input", index=idx)
    r = np.sqrt(a.data)
    out = Tensor(r)
    return _maybe_record(out, (a,), lambda g: ((a, g * 0.5 / r),))


def log(a):
    if np.any(a.data <= 0):
        idx = tuple(int(i) for i in np.argwhere(a.data <= 0)[0])
        raise NumericError("log: non-positive input", index=idx)
    out = Tensor(np.log(a.data))
    return _maybe_record(out, (a,), lambda g: ((a, g / a.data),))


def exp(a):
    e = np.exp(a.data)
    out = Tensor(e)
    return _maybe_record(out, (a,), lambda g: ((a, g * e),))


_UNARY = {
    "neg": neg,
    "relu": relu,
    "leaky-relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "abs": absolute,
    "square": square,
    "log": log,
    "exp": exp,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind, a, b=None):
    """Dispatch an elementwise op by name."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"elementwise '{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"elementwise '{kind}' takes one operand")
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise kind '{kind}'")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def backprop(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _maybe_record(out, (a, b), backprop)


def transpose2d(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {a.data.shape}")
    out = Tensor(a.data.T.copy())
    return _maybe_record(out, (a,), lambda g: ((a, g.T),))


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _maybe_record(out, (a,), lambda g: ((a, g.reshape(a.data.shape)),))


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation, result in the input dtype)


def _norm_axes(shape, axes):
    if axes is None:
        return tuple(range(len(shape)))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -len(shape) <= ax < len(shape):
            raise ShapeError(f"axis {ax} invalid for shape {shape}")
        out.append(ax % len(shape))
    return tuple(sorted(set(out)))


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_reduce(a, axes=None, keepdims=False):
    axes = _norm_axes(a.data.shape, axes)
    out_data = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    out = Tensor(out_data.astype(a.data.dtype))

    def backprop(g):
        return ((a, _expand_reduced(g, a.data.shape, axes, keepdims).copy()),)

    return _maybe_record(out, (a,), backprop)


def mean_reduce(a, axes=None, keepdims=False):
    axes = _norm_axes(a.data.shape, axes)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64)
    out = Tensor(out_data.astype(a.data.dtype))

    def backprop(g):
        return ((a, _expand_reduced(g, a.data.shape, axes, keepdims) / count),)

    return _maybe_record(out, (a,), backprop)


def max_reduce(a, axes=None, keepdims=False):
    axes = _norm_axes(a.data.shape, axes)
    m = a.data.max(axis=axes, keepdims=True)
    out_data = m if keepdims else m.squeeze(axis=axes)
    out = Tensor(out_data.copy())

    def backprop(g):
        mask = (a.data == m).astype(a.data.dtype)
        ties = mask.sum(axis=axes, keepdims=True)
        gb = _expand_reduced(g, a.data.shape, axes, keepdims)
        return ((a, gb * mask / ties),)

    return _maybe_record(out, (a,), backprop)


def reduce(kind, a, axes=None, keepdims=False):
    """Dispatch a reduction by name: sum, mean or max."""
    fns = {"sum": sum_reduce, "mean": mean_reduce, "max": max_reduce}
    if kind not in fns:
        raise ContractError(f"unknown reduce kind '{kind}'")
    return fns[kind](a, axes, keepdims)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of NCHW input with FCkk kernels, zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and kernel, got {x.data.shape}, {w.data.shape}"
        )
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output extent non-positive: {ho}x{wo}")

    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # im2col: (N, H', W', C*kh*kw) rows against (F, C*kh*kw) kernels
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wflat = w.data.reshape(f, c * kh * kw)
    out_data = (cols @ wflat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(out_data))

    def backprop(g):
        grows = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (grows.T @ cols).reshape(w.data.shape)
        gcols = grows @ wflat  # (N*H'*W', C*kh*kw)
        gwin = gcols.reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return ((x, gx), (w, gw))

    return _maybe_record(out, (x, w), backprop)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x expects NCHW, got {x.data.shape}")
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def backprop(g):
        n, c, h2, w2 = g.shape
        gx = g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        return ((x, gx.astype(g.dtype)),)

    return _maybe_record(out, (x,), backprop)


def select_pixels(x, batch_idx, flat_idx):
    """Gather per-pixel feature vectors from an NCHW map.

    Returns a [P, C] matrix with row p = x[batch_idx[p], :, i, j] where
    (i, j) unflattens flat_idx[p] over the spatial extent.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"select_pixels expects NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    bi = np.asarray(batch_idx, dtype=np.int64)
    fi = np.asarray(flat_idx, dtype=np.int64)
    if bi.shape != fi.shape or bi.ndim != 1:
        raise ShapeError("batch_idx and flat_idx must be equal-length vectors")
    if np.any(bi < 0) or np.any(bi >= n) or np.any(fi < 0) or np.any(fi >= h * w):
        raise IndexError("select_pixels: index out of range")
    hi, wi = fi // w, fi % w
    out = Tensor(x.data[bi, :, hi, wi])

    def backprop(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        np.add.at(gx, (bi, slice(None), hi, wi), g)
        return ((x, gx),)

    return _maybe_record(out, (x,), backprop)
