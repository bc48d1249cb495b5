"""Differentiable ops on :class:`Tensor`.

Feature maps are channels-last, ``(batch, height, width, channels)``. For an
STMap batch that is ``(B, rois, frames, rgb)``.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor

INSTANCE_NORM_EPS = 1e-5

# Kink probes: while a recorder is active, piecewise ops append the distance
# of their inputs to the nearest non-differentiable point.
_kink_recorders: list[list[float]] = []


@contextlib.contextmanager
def record_kinks() -> Iterator[list[float]]:
    distances: list[float] = []
    _kink_recorders.append(distances)
    try:
        yield distances
    finally:
        _kink_recorders.pop()


def _note_kink(x: np.ndarray, at: float = 0.0) -> None:
    if _kink_recorders and x.size:
        value = float(np.min(np.abs(x - at)))
        for rec in _kink_recorders:
            rec.append(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; zero gradient where ``a < floor``."""
    a = as_tensor(a)
    _note_kink(a.data, floor)
    mask = a.data > floor

    def backward(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, a.data, floor), (a,), backward, "maximum")


# -- elementwise unary ------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    _note_kink(a.data)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (np.where(out > 0, g, 0.0),)

    return Tensor._result(out, (a,), backward, "relu")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    _note_kink(a.data)
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# -- reductions and shape ---------------------------------------------------

def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return Tensor._result(out, (a,), backward, "mean")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, backward, "concat")


def repeat(a, repeats: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling along one axis."""
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.repeat(a.data, repeats, axis=axis)

    def backward(g):
        shape = a.shape[:axis] + (a.shape[axis], repeats) + a.shape[axis + 1:]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return Tensor._result(out, (a,), backward, "repeat")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of shape (k, n) or (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        g = np.ascontiguousarray(g)
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1.

    ``x``: (B, H, W, Cin); ``w``: (3, 3, Cin, Cout); ``b``: (Cout,) or None.
    Output spatial size is ``(H - 1) // stride + 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d: bad shapes x={x.shape} w={w.shape}")
    bt = as_tensor(b) if b is not None else None
    if bt is not None and bt.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias shape {bt.shape} != ({w.shape[3]},)")

    n, h, wd, cin = x.shape
    cout = w.shape[3]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.zeros((n, h + 2, wd + 2, cin))
    xp[:, 1:-1, 1:-1, :] = x.data
    # im2col. Thin inputs copy a strided window view; wider ones copy one
    # slice per tap so that cin stays the contiguous axis. A height-1 input
    # only ever meets the middle kernel row, the other rows see padding.
    thin = cin < 8
    taps = [(1, kx) for kx in range(3)] if h == 1 else [(ky, kx) for ky in range(3) for kx in range(3)]
    if thin:
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
        cols = win[:, ::stride, ::stride][:, :ho, :wo].reshape(n * ho * wo, cin * 9)
        wmat = w.data.transpose(2, 0, 1, 3).reshape(cin * 9, cout)
    else:
        cols = np.empty((n, ho, wo, len(taps), cin))
        for t, (ky, kx) in enumerate(taps):
            cols[:, :, :, t, :] = xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :]
        cols = cols.reshape(n * ho * wo, len(taps) * cin)
        wmat = np.concatenate([w.data[ky, kx] for ky, kx in taps])
    out = cols @ wmat
    if bt is not None:
        out += bt.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gmat = cols.T @ g2
            if thin:
                gw = gmat.reshape(cin, 3, 3, cout).transpose(1, 2, 0, 3)
            else:
                gw = np.zeros(w.shape)
                for t, (ky, kx) in enumerate(taps):
                    gw[ky, kx] = gmat[t * cin:(t + 1) * cin]
        if bt is not None and bt.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if thin:
                gcols = (g2 @ wmat.T).reshape(n, ho, wo, cin, 3, 3)
                for ky, kx in taps:
                    gxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += gcols[..., ky, kx]
            else:
                # One small matmul per tap avoids materializing the full column gradient.
                for ky, kx in taps:
                    gxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += (
                        (g2 @ w.data[ky, kx].T).reshape(n, ho, wo, cin))
            gx = gxp[:, 1:-1, 1:-1, :]
        return (gx, gw) if bt is None else (gx, gw, gb)

    parents = (x, w) if bt is None else (x, w, bt)
    return Tensor._result(out, parents, backward, "conv2d")


# -- composite ops ----------------------------------------------------------

def global_average_pool(x) -> Tensor:
    """(B, H, W, C) -> (B, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool expects (B, H, W, C), got {x.shape}")
    return mean(x, axis=(1, 2))


def channel_instance_stats(x, eps: float = INSTANCE_NORM_EPS) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel spatial mean and ``sqrt(var + eps)``, each (B, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_instance_stats expects (B, H, W, C), got {x.shape}")
    mu = mean(x, axis=(1, 2), keepdims=True)
    var = mean(square(x - mu), axis=(1, 2))
    sigma = sqrt(var + eps)
    return reshape(mu, (x.shape[0], x.shape[3])), sigma


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(sum(square(x), axis=axis, keepdims=True) + eps)
    return x / norm


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    z = x - shift
    return z - log(sum(exp(z), axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / sum(e, axis=axis, keepdims=True)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else out + b


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    return concat([reshape(v, (1,)) for v in values], axis=0)


__all__ = [
    "INSTANCE_NORM_EPS", "record_kinks", "add", "sub", "mul", "div", "maximum", "neg", "relu",
    "abs", "square", "sqrt", "exp", "log", "tanh", "sum", "mean", "reshape", "transpose",
    "getitem", "concat", "repeat", "matmul", "conv2d", "global_average_pool",
    "channel_instance_stats", "l2_normalize", "log_softmax", "softmax", "linear", "stack_scalars",
]
