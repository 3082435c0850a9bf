"""Differentiable primitives.

Every function takes tensors (or array-likes, which are treated as constants)
and returns a new :class:`Tensor`. Backward rules return one gradient per
input in the input's own shape.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record("softplus", np.logaddexp(0.0, a.data), (a,), lambda g: (g * sig,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", out, (a, b), backward)


# reductions and shape manipulation

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    """Basic and integer-array indexing (slice / gather)."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"getitem: {exc} for shape {a.shape}") from None

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", np.array(out, dtype=a.data.dtype), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, tuple(tensors), backward)


# convolutions

def conv1d(x, w) -> Tensor:
    """Same-padded 1-D convolution over the time axis.

    x: (batch, time, in_channels); w: (width, in_channels, out_channels).
    Output has shape (batch, time, out_channels). Cross-correlation convention.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with filter {w.shape}")
    n, length, cin = x.shape
    width, _, cout = w.shape
    left = (width - 1) // 2
    xp = np.pad(x.data, ((0, 0), (left, width - 1 - left), (0, 0)))
    # (n, length, cin, width) -> (n, length, width*cin)
    cols = sliding_window_view(xp, width, axis=1).transpose(0, 1, 3, 2).reshape(n, length, width * cin)
    wmat = w.data.reshape(width * cin, cout)
    out = cols @ wmat

    def backward(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.tensordot(cols, g, axes=([0, 1], [0, 1])).reshape(w.shape)
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(n, length, width, cin)
            gxp = np.zeros_like(xp)
            for k in range(width):
                gxp[:, k:k + length, :] += gcols[:, :, k, :]
            gx = gxp[:, left:left + length, :]
        return gx, gw

    return record("conv1d", out, (x, w), backward)


def conv2d(x, w, padding: str = "valid") -> Tensor:
    """Stride-1 2-D convolution.

    x: (batch, in_channels, height, width); w: (out_channels, in_channels, kh, kw).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with filter {w.shape}")
    cout, cin, kh, kw = w.shape
    if padding == "same":
        top, lft = (kh - 1) // 2, (kw - 1) // 2
        pads = ((0, 0), (0, 0), (top, kh - 1 - top), (lft, kw - 1 - lft))
    elif padding == "valid":
        pads = ((0, 0),) * 4
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(x.data, pads)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: filter {w.shape} larger than input {x.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, cin, ho, wo, kh, kw
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, cout
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # cout, cin, kh, kw
        if x.requires_grad:
            gwin = np.tensordot(g, w.data, axes=([1], [0]))  # n, ho, wo, cin, kh, kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pads[2][0]:pads[2][0] + x.shape[2], pads[3][0]:pads[3][0] + x.shape[3]]
        return gx, gw

    return record("conv2d", out, (x, w), backward)


# structured solves

def bidiag_solve(diag, superdiag, rhs) -> Tensor:
    """Solve ``B X = rhs`` for upper-bidiagonal ``B`` by back substitution.

    diag: (..., T); superdiag: (..., T-1) holding B[t, t+1]; rhs: (..., T, K).
    Leading axes broadcast.
    """
    d, s, r = as_tensor(diag), as_tensor(superdiag), as_tensor(rhs)
    T = d.shape[-1]
    if s.shape[-1] != max(T - 1, 0) or r.ndim < 2 or r.shape[-2] != T:
        raise ShapeError(
            f"bidiag_solve: diag {d.shape}, superdiag {s.shape}, rhs {r.shape} incompatible"
        )
    batch = np.broadcast_shapes(d.shape[:-1], s.shape[:-1], r.shape[:-2])
    dd = np.broadcast_to(d.data, batch + (T,))
    ss = np.broadcast_to(s.data, batch + (max(T - 1, 0),))
    rr = np.broadcast_to(r.data, batch + r.shape[-2:])
    x = np.empty(batch + r.shape[-2:])
    x[..., T - 1, :] = rr[..., T - 1, :] / dd[..., T - 1, None]
    for t in range(T - 2, -1, -1):
        x[..., t, :] = (rr[..., t, :] - ss[..., t, None] * x[..., t + 1, :]) / dd[..., t, None]

    def backward(g):
        # adjoint solve with the lower-bidiagonal transpose
        y = np.empty_like(x)
        y[..., 0, :] = g[..., 0, :] / dd[..., 0, None]
        for t in range(1, T):
            y[..., t, :] = (g[..., t, :] - ss[..., t - 1, None] * y[..., t - 1, :]) / dd[..., t, None]
        gd = -(y * x).sum(axis=-1)
        gs = -(y[..., :-1, :] * x[..., 1:, :]).sum(axis=-1)
        return (
            _unbroadcast(gd, d.shape),
            _unbroadcast(gs, s.shape),
            _unbroadcast(y, r.shape),
        )

    return record("bidiag_solve", x, (d, s, r), backward)
