"""Differentiable operators used by the model and the losses.

Broadcasting is deliberately limited: binary operators require equal shapes
(or a Python scalar), and :func:`add_bias` is the only per-channel broadcast.
"""
from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np

from ..exceptions import ContractError
from .core import Tensor, as_tensor, make_node


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))
    _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return make_node(a.data * c, (a,), lambda g: (g * c,))
    _check_same_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors in one node."""
    if not tensors:
        raise ContractError("add_n needs at least one tensor")
    for t in tensors[1:]:
        _check_same_shape(tensors[0], t, "add_n")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return make_node(out, tuple(tensors), lambda g: tuple(g for _ in tensors))


def _channel_axis(ndim: int) -> int:
    if ndim in (2, 4):
        return 1
    if ndim == 3:
        return 0
    raise ContractError(f"no channel axis for a {ndim}-d tensor")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias: axis 1 of [N,C] or [B,C,H,W], axis 0 of [C,H,W]."""
    axis = _channel_axis(x.ndim)
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ContractError(f"bias of shape {bias.shape} does not fit {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        return g, g.sum(axis=reduce_axes)

    return make_node(x.data + bias.data.reshape(shape), (x, bias), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    positive = x.data > 0
    scale = np.where(positive, 1.0, slope).astype(x.dtype)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractError("log of a non-positive value")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    """Normalized exponentials along ``axis`` (the class/channel axis)."""
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} out of range for {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = builtins.max(x.size, 1)
    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                     lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inverse = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis % ref.ndim
        ):
            raise ContractError(f"concat: {t.shape} incompatible with {ref.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat each element of the last two axes ``factor`` times."""
    if x.ndim < 2:
        raise ContractError("upsample_nearest needs at least 2 dims")
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return make_node(out, (x,), backward)


def _check_segments(x: Tensor, segments: np.ndarray, n_segments: int) -> np.ndarray:
    segments = np.asarray(segments, dtype=np.int64)
    if x.ndim != 2 or segments.shape != (x.shape[0],):
        raise ContractError(f"segments of shape {segments.shape} do not fit rows of {x.shape}")
    if segments.size and (segments.max() >= n_segments or segments.min() < -1):
        raise ContractError("segment id out of range")
    return segments


def segment_max(x: Tensor, segments, n_segments: int) -> Tensor:
    """Column-wise max of the rows sharing a segment id; empty segments are 0.

    Rows with segment id ``-1`` are ignored. The gradient flows to the
    lowest-index row attaining the max.
    """
    segments = _check_segments(x, segments, n_segments)
    keep = np.flatnonzero(segments >= 0)
    seg = segments[keep]
    rows = x.data[keep]
    n_cols = x.shape[1]
    out = np.full((n_segments, n_cols), -np.inf, dtype=x.dtype)
    np.maximum.at(out, seg, rows)
    occupied = np.zeros(n_segments, dtype=bool)
    occupied[seg] = True
    out[~occupied] = 0
    # winner row per (segment, column): smallest row index reaching the max
    winner = np.full((n_segments, n_cols), x.shape[0], dtype=np.int64)
    hit_r, hit_c = np.nonzero(rows == out[seg])
    np.minimum.at(winner, (seg[hit_r], hit_c), keep[hit_r])

    def backward(g):
        full = np.zeros_like(x.data)
        occ = np.flatnonzero(occupied)
        full[winner[occ], np.arange(n_cols)] = g[occ]
        return (full,)

    return make_node(out, (x,), backward)


def segment_mean(x: Tensor, segments, n_segments: int) -> Tensor:
    """Column-wise mean of the rows sharing a segment id; empty segments are 0."""
    segments = _check_segments(x, segments, n_segments)
    keep = np.flatnonzero(segments >= 0)
    seg = segments[keep]
    counts = np.bincount(seg, minlength=n_segments).astype(x.dtype)
    out = np.zeros((n_segments, x.shape[1]), dtype=x.dtype)
    np.add.at(out, seg, x.data[keep])
    safe = np.maximum(counts, 1)[:, None]
    out /= safe

    def backward(g):
        full = np.zeros_like(x.data)
        full[keep] = (g / safe)[seg]
        return (full,)

    return make_node(out, (x,), backward)


max_pool_over_group = segment_max


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; entries with index ``-1`` produce zero rows."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.ndim != 1:
        raise ContractError(f"gather_rows expects a matrix and an index vector, got {x.shape}")
    if index.size and (index.max() >= x.shape[0] or index.min() < -1):
        raise ContractError("gather index out of range")
    valid = index >= 0
    out = np.zeros((index.size, x.shape[1]), dtype=x.dtype)
    out[valid] = x.data[index[valid]]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index[valid], g[valid])
        return (full,)

    return make_node(out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool = True,
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per channel over every other axis.

    Running statistics follow ``running = momentum * running + (1 - momentum)
    * batch`` and are updated in place when ``training`` is true.
    """
    axis = _channel_axis(x.ndim)
    c = x.shape[axis]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (c,):
            raise ContractError(f"batch_norm parameter of shape {t.shape} does not fit {c} channels")
    shape = [1] * x.ndim
    shape[axis] = c
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    m = x.size // c
    if training:
        mu = x.data.mean(axis=reduce_axes)
        var = x.data.var(axis=reduce_axes)
        running_mean.data *= momentum
        running_mean.data += (1 - momentum) * mu
        unbiased = var * (m / builtins.max(m - 1, 1))
        running_var.data *= momentum
        running_var.data += (1 - momentum) * unbiased
    else:
        mu = running_mean.data
        var = running_var.data
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = x_hat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        d_gamma = (g * x_hat).sum(axis=reduce_axes)
        d_beta = g.sum(axis=reduce_axes)
        gx_hat = g * gamma.data.reshape(shape)
        if training:
            dx = (
                gx_hat
                - gx_hat.mean(axis=reduce_axes, keepdims=True)
                - x_hat * (gx_hat * x_hat).mean(axis=reduce_axes, keepdims=True)
            ) * inv_std.reshape(shape)
        else:
            dx = gx_hat * inv_std.reshape(shape)
        return dx, d_gamma, d_beta

    return make_node(out.astype(x.dtype), (x, gamma, beta), backward)


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    """Concatenate scalar tensors into a vector."""
    return concat([reshape(as_tensor(v), (1,)) for v in values], axis=0)
