"""Differentiable operations.

Every op computes its forward value with numpy, rejects non-finite results,
and records a backward closure when a tape is active and some input needs a
gradient.
"""

from __future__ import annotations

import functools
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatchError, DimensionError, DomainError
from .tensor import Tensor, active_tape, as_tensor, check_finite

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _quiet(fn):
    """Silence numpy float warnings; ``_emit`` raises on non-finite output instead."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(all="ignore"):
            return fn(*args, **kwargs)
    return wrapper


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    check_finite(out, op)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.requires_grad = False
    result.tape = None
    result.node_id = None
    result.name = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, result, backward)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


@_quiet
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


@_quiet
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


@_quiet
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


@_quiet
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _emit("div", out, (a, b), backward)


@_quiet
def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


@_quiet
def square(a: Tensor) -> Tensor:
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


@_quiet
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


@_quiet
def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


@_quiet
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


@_quiet
def log(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("log of a negative value")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@_quiet
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward)


@_quiet
def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit("mean", np.asarray(out), (a,), backward)


@_quiet
def var(a: Tensor, axis=None, ddof: int = 0, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count - ddof <= 0:
        raise DegenerateBatchError(f"variance over {count} values with ddof={ddof}")
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).sum(axis=axes, keepdims=keepdims) / (count - ddof)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * 2.0 * centered / (count - ddof),)

    return _emit("var", np.asarray(out), (a,), backward)


@_quiet
def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


@_quiet
def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


@_quiet
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", out, tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra


@_quiet
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


@_quiet
def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit norm; zero rows stay zero with zero gradient."""
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got shape {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    out = np.where(norms > 0, a.data / safe, 0.0)

    def backward(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        return (np.where(norms > 0, (g - out * proj) / safe, 0.0),)

    return _emit("l2_normalize_rows", out, (a,), backward)


# ---------------------------------------------------------------------------
# convolutional layers


@_quiet
def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d supports 3x3 kernels only, got {kh}x{kw}")
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # (B, C, H, W, 3, 3) -> rows of (B*H*W, C*9)
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    kmat = kernel.data.reshape(F, C * 9)
    out = (cols @ kmat.T).reshape(B, H, W, F).transpose(0, 3, 1, 2).copy()

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, F)
        dk = (g2.T @ cols).reshape(F, C, 3, 3)
        dcols = (g2 @ kmat).reshape(B, H, W, C, 3, 3)
        dxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                dxp[:, :, di:di + H, dj:dj + W] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], dk

    return _emit("conv2d", out, (x, kernel), backward)


@_quiet
def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Ties route the gradient to the first maximum."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2d needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        mask = np.arange(4) == idx[..., None]
        gw = (g[..., None] * mask).reshape(B, C, H // 2, W // 2, 2, 2)
        return (gw.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return _emit("maxpool2d", out, (x,), backward)


@_quiet
def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[Tensor],
    running_var: Optional[Tensor],
    train: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Batch normalization over the batch (and spatial) axes.

    In train mode the running statistics are updated in place with
    ``r <- (1 - momentum) * r + momentum * batch_stat``; the running variance
    tracks the unbiased batch variance.
    """
    if x.ndim == 2:
        axes, pshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, pshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise DimensionError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    D = x.shape[1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"batchnorm: gamma/beta must have shape ({D},), got {gamma.shape}, {beta.shape}")
    g_ = gamma.data.reshape(pshape)
    b_ = beta.data.reshape(pshape)

    if train:
        if x.shape[0] < 2:
            raise DegenerateBatchError(f"batchnorm in train mode needs batch >= 2, got {x.shape[0]}")
        m = int(np.prod([x.shape[ax] for ax in axes]))
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        v = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(v + eps)
        xhat = centered * inv_std
        out = g_ * xhat + b_
        if running_mean is not None:
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu.reshape(-1)
        if running_var is not None:
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * v.reshape(-1) * m / (m - 1)

        def backward(g):
            dxhat = g * g_
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        if running_mean is None or running_var is None:
            raise DimensionError("batchnorm in eval mode needs running statistics")
        inv_std = 1.0 / np.sqrt(running_var.data.reshape(pshape) + eps)
        xhat = (x.data - running_mean.data.reshape(pshape)) * inv_std
        out = g_ * xhat + b_

        def backward(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit("batchnorm", out, (x, gamma, beta), backward)
