"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op takes :class:`Tensor` inputs and returns a new
:class:`Tensor`. When a :class:`Tape` is active and at least one input
requires a gradient, the op appends a record ``(output, inputs, vjp)`` to it;
:func:`backward` replays those records in exact reverse order.

numpy arrays carry the payload. Shapes follow numpy broadcasting for the
elementwise ops; gradients are summed back onto the broadcast input shapes.
"""
from __future__ import annotations

import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "ConfigError",
    "ContractError",
    "tensor",
    "apply_op",
    "no_grad_value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "sigmoid",
    "relu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "flip",
    "concat",
    "stack",
    "matmul",
    "softmax_axis",
    "logsumexp",
    "layer_norm",
    "conv3d_shared",
    "conv3d",
    "backward",
    "zero_grads",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is invalid (even kernel width, bad chunk, ...)."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class Tensor:
    """Immutable n-d array of float64 values.

    ``requires_grad`` marks tensors that are (transitively) derived from a
    :class:`Parameter` on the active tape.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
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

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Learnable leaf tensor with an accumulating gradient buffer.

    The payload is updated in place by optimizers; everything else treats it
    as read-only.
    """

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.grad = Tensor(np.zeros_like(self.data))
        self.name = name

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


# ---------------------------------------------------------------------------
# tape


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = f(params)
        backward(tape, loss)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def apply_op(out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and record it on the active tape.

    ``vjp(g)`` receives the upstream gradient (a numpy array shaped like
    ``out``) and returns one gradient array, or ``None``, per input.
    """
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.records.append((result, tuple(inputs), vjp))
    return result


def no_grad_value(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        ),
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return apply_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = tensor(a)
    return apply_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return apply_op(out, (a,), lambda g: (g * 0.5 / out,))


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return apply_op(out, (a,), lambda g: (g * _sigmoid(x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = _sigmoid(a.data)
    return apply_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return apply_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return apply_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing. Advanced indexing accumulates with ``np.add.at``."""
    a = tensor(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)

    def vjp(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return apply_op(np.array(a.data[idx]), (a,), vjp)


def flip(a, axis: int) -> Tensor:
    """Reverse ``a`` along ``axis``. Self-adjoint, so the vjp is another flip."""
    a = tensor(a)
    return apply_op(
        np.ascontiguousarray(np.flip(a.data, axis)),
        (a,),
        lambda g: (np.flip(g, axis),),
    )


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return apply_op(out, ts, vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A rank-1 ``b`` is not accepted: pass a column matrix instead.
    """
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op(out, (a, b), vjp)


def softmax_axis(t, axis: int) -> Tensor:
    """Softmax along ``axis``, shifted by the max for stability."""
    t = tensor(t)
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"softmax_axis: axis {axis} out of range for shape {t.shape}")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op(out, (t,), vjp)


def logsumexp(t, axis: int, keepdims: bool = False) -> Tensor:
    t = tensor(t)
    m = t.data.max(axis=axis, keepdims=True)
    s = np.exp(t.data - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = np.exp(t.data - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return apply_op(out, (t,), vjp)


def layer_norm(x, scale, offset, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    mu = mean(x, -1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), -1, keepdims=True)
    return add(mul(div(xc, sqrt(add(var, eps))), scale), offset)


# ---------------------------------------------------------------------------
# 3-D convolutions (zero padding, stride 1, shape preserving)


def _offset_slices(dt: int, dh: int, dw: int, T: int, H: int, W: int):
    """Destination / source slices of the last three axes for one kernel offset.

    ``out[dst] += k * x[src]`` realises ``out[t] += k * x[t + dt]`` with zero
    padding; returns ``None`` if the offset reads only padding.
    """
    spans = []
    for d, n in ((dt, T), (dh, H), (dw, W)):
        lo, hi = max(0, -d), min(n, n - d)
        if lo >= hi:
            return None
        spans.append((slice(lo, hi), slice(lo + d, hi + d)))
    dst = (Ellipsis,) + tuple(s[0] for s in spans)
    src = (Ellipsis,) + tuple(s[1] for s in spans)
    return dst, src


def _kernel_offsets(shape3: tuple[int, int, int]):
    kt, kh, kw = shape3
    rt, rh, rw = kt // 2, kh // 2, kw // 2
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                yield (i, j, k), (i - rt, j - rh, k - rw)


#: grids with at most this many voxels use a dense banded matrix for the shared conv
DENSE_CONV_MAX_VOXELS = 2048


@functools.lru_cache(maxsize=64)
def _band_plan(T: int, H: int, W: int, w: int):
    """Index triples (dst voxel, src voxel, kernel entry) of the shared conv."""
    r = w // 2
    t, h, v = np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij")
    dst_parts, src_parts, k_parts = [], [], []
    for (i, j, k), (dt, dh, dw) in _kernel_offsets((w, w, w)):
        tt, hh, vv = t + dt, h + dh, v + dw
        ok = (tt >= 0) & (tt < T) & (hh >= 0) & (hh < H) & (vv >= 0) & (vv < W)
        if not ok.any():
            continue
        dst_parts.append(((t * H + h) * W + v)[ok])
        src_parts.append(((tt * H + hh) * W + vv)[ok])
        k_parts.append(np.full(ok.sum(), (i * w + j) * w + k))
    return np.concatenate(dst_parts), np.concatenate(src_parts), np.concatenate(k_parts)


def conv3d_shared(x, kernel) -> Tensor:
    """One odd ``w×w×w`` kernel applied identically to every leading channel.

    ``x`` has shape ``(..., T, H, W)``; out-of-range reads contribute zero.
    Small grids are convolved as one matmul with the banded operator matrix,
    larger ones by accumulating shifted slices.
    """
    x, kernel = tensor(x), tensor(kernel)
    if kernel.ndim != 3 or len(set(kernel.shape)) != 1:
        raise ShapeError(f"conv3d_shared: kernel must be cubic, got {kernel.shape}")
    if kernel.shape[0] % 2 == 0:
        raise ConfigError(f"conv3d_shared: window {kernel.shape[0]} is even")
    if x.ndim < 3:
        raise ShapeError(f"conv3d_shared: input needs >= 3 axes, got {x.shape}")
    T, H, W = x.shape[-3:]
    if T * H * W <= DENSE_CONV_MAX_VOXELS:
        return _conv3d_shared_dense(x, kernel)
    xd, kd = x.data, kernel.data
    plan = []
    for idx, off in _kernel_offsets(kd.shape):
        sl = _offset_slices(*off, T, H, W)
        if sl is not None:
            plan.append((idx, sl))
    out = np.zeros_like(xd)
    for idx, (dst, src) in plan:
        out[dst] += kd[idx] * xd[src]

    def vjp(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        for idx, (dst, src) in plan:
            gsl = g[dst]
            if gx is not None:
                gx[src] += kd[idx] * gsl
            if gk is not None:
                gk[idx] = np.vdot(gsl, xd[src])
        return gx, gk

    return apply_op(out, (x, kernel), vjp)


def _conv3d_shared_dense(x: Tensor, kernel: Tensor) -> Tensor:
    T, H, W = x.shape[-3:]
    n = T * H * W
    w = kernel.shape[0]
    dst, src, kidx = _band_plan(T, H, W, w)
    M = np.zeros((n, n))
    M[dst, src] = kernel.data.reshape(-1)[kidx]
    xf = x.data.reshape(-1, n)
    out = (xf @ M.T).reshape(x.shape)

    def vjp(g):
        gf = g.reshape(-1, n)
        gx = (gf @ M).reshape(x.shape) if x.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gM = gf.T @ xf
            gk = np.bincount(kidx, weights=gM[dst, src], minlength=w ** 3).reshape(kernel.shape)
        return gx, gk

    return apply_op(out, (x, kernel), vjp)


@functools.lru_cache(maxsize=64)
def _gather_plan(T: int, H: int, W: int, kshape: tuple[int, int, int]) -> np.ndarray:
    """Source voxel per (output voxel, kernel offset); ``T*H*W`` marks padding."""
    n = T * H * W
    t, h, v = np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij")
    cols = []
    for _, (dt, dh, dw) in _kernel_offsets(kshape):
        tt, hh, vv = t + dt, h + dh, v + dw
        ok = (tt >= 0) & (tt < T) & (hh >= 0) & (hh < H) & (vv >= 0) & (vv < W)
        cols.append(np.where(ok, (tt * H + hh) * W + vv, n).reshape(-1))
    return np.stack(cols, axis=1)


def _im2col(x: np.ndarray, kshape) -> np.ndarray:
    """``(B, C, T, H, W)`` -> ``(B*T*H*W, C*K)`` zero-padded neighbourhoods."""
    B, C, T, H, W = x.shape
    n = T * H * W
    gather = _gather_plan(T, H, W, tuple(kshape))
    xp = np.zeros((B, C, n + 1))
    xp[:, :, :n] = x.reshape(B, C, n)
    return xp[:, :, gather].transpose(0, 2, 1, 3).reshape(B * n, -1)


def _col_conv(cols: np.ndarray, w: np.ndarray, B: int, T: int, H: int, W: int) -> np.ndarray:
    Cout = w.shape[0]
    out = cols @ w.reshape(Cout, -1).T
    return np.ascontiguousarray(out.reshape(B, T * H * W, Cout).transpose(0, 2, 1)).reshape(B, Cout, T, H, W)


def conv3d(x, weight, bias=None) -> Tensor:
    """Full cross-channel 3-D convolution.

    ``x``: ``(B, Cin, T, H, W)``; ``weight``: ``(Cout, Cin, kt, kh, kw)`` with
    odd kernel extents; ``bias``: ``(Cout,)``. Returns ``(B, Cout, T, H, W)``.
    """
    x, weight = tensor(x), tensor(weight)
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: incompatible input {x.shape} and weight {weight.shape}")
    if any(k % 2 == 0 for k in weight.shape[2:]):
        raise ConfigError(f"conv3d: kernel extents must be odd, got {weight.shape[2:]}")
    B, Cin, T, H, W = x.shape
    Cout = weight.shape[0]
    wd = weight.data
    cols = _im2col(x.data, wd.shape[2:])
    out = _col_conv(cols, wd, B, T, H, W)

    def vjp(g):
        gw = None
        if weight.requires_grad:
            gf = g.reshape(B, Cout, -1).transpose(0, 2, 1).reshape(-1, Cout)
            gw = (gf.T @ cols).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            # adjoint of a zero-padded stride-1 conv: flipped, channel-transposed kernel
            w_adj = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _col_conv(_im2col(g, wd.shape[2:]), w_adj, B, T, H, W)
        return gx, gw

    out_t = apply_op(out, (x, weight), vjp)
    if bias is not None:
        out_t = add(out_t, reshape(bias, (1, Cout, 1, 1, 1)))
    return out_t


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Parameter."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad.data += gi
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    entries: dict[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is evaluated with no arguments and must read ``params`` directly.
    ``entries`` optionally restricts the check to given flat indices per
    parameter name (used to sample large models).
    """
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.data.reshape(-1)
        idxs = entries.get(p.name, ()) if entries is not None else range(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            up = f().data.item()
            flat[i] = orig - step
            down = f().data.item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[i] - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
