"""Differentiable ops over :class:`Tensor`.

Layout conventions: images are NCHW, conv weights are (out, in, kh, kw),
fully-connected weights are (in, out). Every op computes in the dtype of
its first input, so a float64 graph stays float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, note_branch

# -log(1e-12): cross-entropy ceiling once a probability is clamped.
LOG_CLAMP = float(-np.log(1e-12))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data + b.data.astype(a.dtype, copy=False)
    except ValueError as exc:
        raise ShapeError("add", f"cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        "add", value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    """Product with a scalar constant or elementwise product of two tensors."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim != 0:
            raise ShapeError("mul", "constant factor must be a scalar")
        return Tensor.from_op("mul", a.data * c, (a,), lambda g: (g * c,))
    try:
        value = a.data * b.data
    except ValueError as exc:
        raise ShapeError("mul", f"cannot broadcast {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data
    return Tensor.from_op(
        "mul",
        value,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def cast(x: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input dtype."""
    src = x.dtype
    return Tensor.from_op("cast", x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch("relu", mask)
    return Tensor.from_op("relu", x.data * mask, (x,), lambda g: (g * mask,))


def hinge(x: Tensor, margin: float = 1.0) -> Tensor:
    """max(margin - x, 0). At the kink the subgradient 0 is used."""
    slack = margin - x.data
    mask = slack > 0
    note_branch("hinge", mask)
    return Tensor.from_op("hinge", np.where(mask, slack, 0).astype(x.dtype), (x,), lambda g: (-g * mask,))


# ----------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return Tensor.from_op("sum", np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", f"expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return Tensor.from_op("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


# -------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from exc
    old = x.shape
    return Tensor.from_op("reshape", value, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        "transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),)
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "nothing to concatenate")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError("concat", f"incompatible shapes {shapes} along axis {axis}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor.from_op("concat", value, tensors, backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError("take", f"index out of range for axis of length {n}")
    value = np.take(x.data, idx, axis=axis)

    def backward(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor.from_op("take", value, (x,), backward)


def upsample_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of an NCHW map to spatial ``size``.

    Source index for output i is floor(i * in / out), so non-integer factors
    (7 -> 14, 4 -> 7) are handled.
    """
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest", f"expected NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    oh, ow = size
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    value = x.data[:, :, rows][:, :, :, cols]

    def backward(g):
        out = np.zeros_like(x.data)
        tmp = np.zeros((g.shape[0], g.shape[1], h, ow), dtype=g.dtype)
        np.add.at(tmp, (slice(None), slice(None), rows), g)
        np.add.at(out, (slice(None), slice(None), slice(None), cols), tmp)
        return (out,)

    return Tensor.from_op("upsample_nearest", value, (x,), backward)


# ----------------------------------------------------------------- layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N, in) @ w (in, out) + b (out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear", f"bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    value = xd @ wd
    if b is not None:
        value = value + b.data

    def backward(g):
        gx = g @ wd.T
        gw = xd.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op("linear", value, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with (O, C, kh, kw) kernels, zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected NCHW input and OCHW weight, got {x.shape}, {w.shape}")
    n, c, h, wd_ = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError("conv2d", f"input has {c} channels, weight expects {cw}")
    if b is not None and b.shape != (o,):
        raise ShapeError("conv2d", f"bias {b.shape} does not match {o} output channels")
    hp, wp = h + 2 * padding, wd_ + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wm = w.data.reshape(o, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    value = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape)
        dcols = (gm @ wm).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = dxp[:, :, padding : padding + h, padding : padding + wd_] if padding else dxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op("conv2d", value, parents, backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first element."""
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d", f"expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2d", f"spatial size {h}x{w} is not even")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    note_branch("max_pool2d", arg)
    value = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor.from_op("max_pool2d", value, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of (N, C) or (N, C, H, W) input.

    In training mode batch statistics are used and, when ``update_stats``,
    the running buffers are updated in place.
    """
    if x.data.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ShapeError("batch_norm", f"input {x.shape} incompatible with {gamma.shape[0]} channels")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            m = xd.size // xd.shape[1]
            running_mean *= 1 - momentum
            running_mean += momentum * mu.astype(running_mean.dtype)
            running_var *= 1 - momentum
            running_var += momentum * (var * m / max(m - 1, 1)).astype(running_var.dtype)
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    value = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = xd.size // xd.shape[1]
            gx = (
                inv.reshape(bshape)
                / m
                * (m * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return Tensor.from_op("batch_norm", value, (x, gamma, beta), backward)


# ----------------------------------------------------------- probabilities


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op("softmax", p, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row -log softmax(logits)[label], clamped at -log(1e-12).

    Returns shape (N,). Rows whose loss hits the clamp get zero gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy", f"expected (N, classes) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError("cross_entropy", f"{labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("cross_entropy", f"label out of range for {k} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    raw = lse - z[np.arange(n), labels]
    clamped = raw >= LOG_CLAMP
    note_branch("cross_entropy", clamped)
    value = np.minimum(raw, LOG_CLAMP).astype(logits.dtype)
    p = np.exp(z - lse[:, None])

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1
        d *= (g * ~clamped)[:, None]
        return (d.astype(logits.dtype),)

    return Tensor.from_op("cross_entropy", value, (logits,), backward)
