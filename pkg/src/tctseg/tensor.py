"""Dense tensors with a reverse-mode tape.

Every differentiable primitive used by the network and the losses lives
here. Arrays are numpy, ``float32`` for training; a ``float64`` mode is used
only for gradient checks (ops preserve the dtype of their inputs).

Recording is explicit: operations are appended to the active :class:`Tape`
(``with Tape() as tape: ...``) only when at least one input requires a
gradient. Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from tctseg import _kernels
from tctseg.errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

# spatial extent below which im2col+matmul beats the compiled kernel
_IM2COL_BELOW = 16

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording inside a ``Tape`` block."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


class Tensor:
    """An n-d float array, optionally tracked for gradients.

    Layout is numpy C order, so for 5-d tensors ``[B, C, Z, Y, X]`` the flat
    index is ``(((b*C + c)*Z + z)*Y + y)*X + x``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of executed primitives.

    ``backward`` walks the log in exact reverse order; gradients reaching a
    tensor from several consumers are summed. Leaf tensors (those not
    produced on this tape) receive their gradient in ``.grad``, accumulating
    onto whatever is already there.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, backward):
        self.records.append(_Record(out, inputs, backward))

    def backward(self, loss, grad=None):
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor")
        if grad is None:
            if loss.size != 1:
                raise ContractError(f"backward from a non-scalar of shape {loss.shape} needs an explicit grad")
            grad = np.ones_like(loss.data)
        produced = {id(r.out) for r in self.records}
        pending = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        if id(loss) in pending and id(loss) not in produced and loss.requires_grad:
            g = pending.pop(id(loss))
            loss.grad = g if loss.grad is None else loss.grad + g
        self.records.clear()


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, inputs, backward):
    """Wrap ``data`` as an op output, recording it when a tape is active."""
    tape = current_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _is_scalar(t):
    return t.ndim == 0 or t.size == 1 and t.ndim <= 1


def _check_binary(a, b, opname):
    if a.shape == b.shape:
        return
    if _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is allowed)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape).astype(g.dtype)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward)


def scale(a, factor):
    """Multiply by a Python constant."""
    factor = float(factor)

    def backward(g):
        return (g * a.dtype.type(factor),)

    return _make(a.data * a.dtype.type(factor), (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, a.dtype.type(0)), (a,), backward)


def log(a):
    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def square(a):
    def backward(g):
        return (g * a.dtype.type(2) * a.data,)

    return _make(a.data * a.data, (a,), backward)


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis=axes, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------ structure

def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a, index):
    out = a.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward)


def reshape(a, shape):
    if int(np.prod(shape)) != a.size and -1 not in tuple(shape):
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} values) to {tuple(shape)}")

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=1):
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def channel_mix(x, matrix):
    """Linear recombination of channels: ``out[:, k] = sum_c matrix[k, c] * x[:, c]``.

    ``matrix`` is a constant; channel merging and channel selection are both
    expressed through it.
    """
    m = np.asarray(matrix, dtype=x.dtype)
    if m.ndim != 2 or m.shape[1] != x.shape[1]:
        raise ShapeError(f"channel_mix: matrix {m.shape} does not match {x.shape[1]} channels")
    B, C = x.shape[:2]
    rest = x.shape[2:]
    out = np.matmul(m, x.data.reshape(B, C, -1)).reshape((B, m.shape[0]) + rest)

    def backward(g):
        gx = np.matmul(m.T, g.reshape(B, m.shape[0], -1))
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward)


# -------------------------------------------------------------------- softmax

def softmax_channels(logits):
    """Softmax over axis 1, stabilised by subtracting the per-voxel max."""
    if logits.ndim < 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs at least 2 channels, got shape {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (logits,), backward)


# ---------------------------------------------------------------- convolution

def _im2col(xp, k, out_spatial):
    B, C = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    # win: B, C, Z', Y', X', k, k, k  ->  B, C*k^3, V
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(B, C * k ** 3, int(np.prod(out_spatial)))
    return cols


def _correlate(xp, w, out_spatial):
    """Valid cross-correlation of an already padded input."""
    B = xp.shape[0]
    Co, K = w.shape[0], w.shape[2]
    if min(out_spatial) < _IM2COL_BELOW or K == 1:
        cols = _im2col(xp, K, out_spatial)
        out = np.matmul(w.reshape(Co, -1), cols)
        return out.reshape((B, Co) + tuple(out_spatial))
    out = np.empty((B, Co) + tuple(out_spatial), dtype=xp.dtype)
    _kernels.conv3d_forward(np.ascontiguousarray(xp), np.ascontiguousarray(w), out)
    return out


def _weight_grad(xp, g, wshape, spatial_out):
    Co, Ci, K = wshape[0], wshape[1], wshape[2]
    if min(spatial_out) < _IM2COL_BELOW or K == 1:
        cols = _im2col(xp, K, spatial_out)
        g2 = g.reshape(g.shape[0], Co, -1)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(wshape).astype(xp.dtype)
    if Co >= 16 or min(spatial_out) <= 16:
        # one GEMM per tap over batch and space
        Z, Y, X = spatial_out
        gw = np.empty(wshape, dtype=xp.dtype)
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(Co, -1)
        xt = xp.transpose(1, 0, 2, 3, 4)
        for a in range(K):
            for b in range(K):
                for c in range(K):
                    sl = np.ascontiguousarray(xt[:, :, a:a + Z, b:b + Y, c:c + X]).reshape(Ci, -1)
                    gw[:, :, a, b, c] = g2 @ sl.T
        return gw
    gw = np.zeros(wshape, dtype=xp.dtype)
    _kernels.conv3d_weight_grad(np.ascontiguousarray(xp), g, gw)
    return gw


def _pad3(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv3d(x, weight, bias=None, padding=1):
    """Stride-1 3-D cross-correlation with zero padding."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kz, ky, kx = weight.shape[2:]
    if not (kz == ky == kx):
        raise ShapeError(f"conv3d supports cubic kernels only, got {weight.shape[2:]}")
    K = kz
    p = int(padding)
    spatial_out = tuple(s + 2 * p - K + 1 for s in x.shape[2:])
    if min(spatial_out) < 1:
        raise ShapeError(f"conv3d: kernel {K} does not fit input {x.shape[2:]} with padding {p}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d: bias shape {bias.shape} does not match {weight.shape[0]} outputs")

    xp = _pad3(x.data, p)
    w = weight.data
    out = _correlate(xp, w, spatial_out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad:
            # full correlation with the flipped, transposed kernel
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gp = _pad3(g, K - 1)
            gxp = _correlate(gp, wf, xp.shape[2:])
            gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3], p:p + x.shape[4]] if p else gxp
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = _weight_grad(xp, g, w.shape, spatial_out)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, inputs, backward)


# -------------------------------------------------------------------- pooling

def maxpool3d(x, window=2):
    """Non-overlapping max pooling; gradient goes to the first maximum in scan order."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects a 5-d tensor, got {x.shape}")
    k = int(window)
    B, C, Z, Y, X = x.shape
    if Z % k or Y % k or X % k:
        raise ShapeError(f"maxpool3d: spatial dims {x.shape[2:]} not divisible by {k}")
    v = x.data.reshape(B, C, Z // k, k, Y // k, k, X // k, k)
    v = v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, Z // k, Y // k, X // k, k ** 3)
    arg = v.argmax(axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gv = np.zeros(v.shape, dtype=g.dtype)
        np.put_along_axis(gv, arg[..., None], g[..., None], axis=-1)
        gv = gv.reshape(B, C, Z // k, Y // k, X // k, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gv.reshape(B, C, Z, Y, X),)

    return _make(np.ascontiguousarray(out), (x,), backward)


# ------------------------------------------------------------------- resizing

def linear_interp_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic matrix mapping ``n_in`` samples to ``n_out`` (align-corners off).

    Output sample ``o`` reads source coordinate ``(o + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    ratio = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def _apply_axis(arr, mat, axis):
    moved = np.moveaxis(arr, axis, -1)
    res = moved @ mat.T
    return np.moveaxis(res, -1, axis)


def upsample_trilinear3d(x, factor=2):
    if x.ndim != 5:
        raise ShapeError(f"upsample_trilinear3d expects a 5-d tensor, got {x.shape}")
    mats = [linear_interp_matrix(n, n * factor, dtype=x.dtype) for n in x.shape[2:]]
    out = x.data
    for ax, m in zip((2, 3, 4), mats):
        out = _apply_axis(out, m, ax)

    def backward(g):
        for ax, m in zip((2, 3, 4), mats):
            g = _apply_axis(g, m.T, ax)
        return (np.ascontiguousarray(g),)

    return _make(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------- grad check

def _resolved_error(central, flat, coords, analytic, h, tol, lo, fscale):
    """Per coordinate, the smallest analytic mismatch over self-consistent steps.

    A step resolves a coordinate when its quotients at ``step`` and
    ``step/2`` agree to ``tol/4`` and the half-step difference of ``f`` is
    large enough that float64 rounding of ``f`` stays below ``tol/4`` of it.
    Returns ``(error, resolved)``; the error of an unresolved coordinate is 0
    and it is flagged instead.
    """
    min_diff = 4.0 / tol * np.finfo(np.float64).eps * max(fscale, 1e-300)
    err = np.zeros(len(coords))
    resolved = np.zeros(len(coords), bool)
    for k, i in enumerate(coords):
        best = np.inf
        flat_everywhere = True
        for step in (h, 10 * h, h / 10, h / 100):
            full, half = central(flat, i, step), central(flat, i, step / 2)
            scale_ = max(abs(full), abs(half), lo)
            if abs(half) * step < min_diff:
                continue
            flat_everywhere = False
            if abs(full - half) / scale_ > tol / 4:
                continue
            resolved[k] = True
            best = min(best, abs(analytic[k] - half) / max(abs(analytic[k]), abs(half), lo))
            if best < tol:
                break
        if flat_everywhere and analytic[k] == 0.0:
            # f does not move at any step and the tape says exactly zero
            resolved[k], best = True, 0.0
        err[k] = best if resolved[k] else 0.0
    return err, resolved


def grad_check(fn, inputs, h=1e-6, dtype=np.float64, max_coords=64, seed=0, floor=1e-6,
               resolve=None, report=None):
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    ``fn`` must return a scalar Tensor. Inputs are cast to ``dtype``; up to
    ``max_coords`` coordinates per input are probed (all of them for small
    inputs). The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor * scale)`` with
    ``scale`` the largest numeric gradient magnitude seen for that input, so
    entries many orders below the gradient's scale are compared in absolute
    terms. Returns the worst relative error over all probed coordinates.

    With ``resolve`` set, each coordinate is differenced at the steps
    ``h, 10h, h/10, h/100`` (each paired with half of itself). A step counts only
    when its two quotients agree to ``resolve/4``; the coordinate's error is
    the smallest mismatch over the steps that count. A wrong gradient
    disagrees with every self-consistent quotient, while a relu/maxpool kink
    inside one step or cancellation at a tiny step is skipped. Coordinates
    no step resolves are excluded and counted in ``report["unresolved"]``.
    """
    rng = np.random.default_rng(seed)
    cast = [Tensor(np.array(t.data, dtype=dtype), requires_grad=True, name=t.name) for t in inputs]

    with Tape() as tape:
        out = fn(*cast)
    if not isinstance(out, Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"grad_check: function must return a scalar, got {shape}")
    if out.requires_grad:
        tape.backward(out)
    else:
        tape.records.clear()

    def evaluate():
        with no_grad():
            return float(fn(*cast).data)

    def central(flat, idx, step):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = evaluate()
        flat[idx] = orig - step
        fm = evaluate()
        flat[idx] = orig
        return (fp - fm) / (2 * step)

    def rel(x, y, lo):
        return np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), lo)

    worst = 0.0
    probed = unresolved = 0
    for t in cast:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        a = analytic.reshape(-1)[coords].astype(np.float64)
        if resolve is None:
            numeric = np.array([central(flat, i, h) for i in coords])
            scale_ = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0))
            lo = max(floor * scale_, 1e-300)
            err = rel(a, numeric, lo)
            err[(np.abs(a) == 0) & (np.abs(numeric) == 0)] = 0.0
        else:
            lo = max(floor * np.abs(a).max(initial=0.0), 1e-300)
            err, ok = _resolved_error(central, flat, coords, a, h, resolve, lo, abs(float(out.data)))
            unresolved += int(np.count_nonzero(~ok))
        probed += len(coords)
        worst = max(worst, float(err.max(initial=0.0)))
    if report is not None:
        report.update(probed=probed, unresolved=unresolved)
    return worst
