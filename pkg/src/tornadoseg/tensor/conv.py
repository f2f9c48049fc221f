"""2-D convolution with zero or wrap-around (azimuth) padding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import ContractError
from . import ops
from .core import Tensor, make_node


@dataclass(frozen=True)
class PaddingMode:
    """Padding rule per spatial axis.

    Rows are always zero-padded. Columns are zero-padded or wrapped, the
    latter matching a sensor that sweeps the full horizontal circle.
    """

    vertical: str = "zero"
    horizontal: str = "zero"

    def __post_init__(self):
        if self.vertical != "zero":
            raise ContractError(f"unsupported vertical padding {self.vertical!r}")
        if self.horizontal not in ("zero", "circular"):
            raise ContractError(f"unsupported horizontal padding {self.horizontal!r}")


ZERO = PaddingMode()
CIRCULAR = PaddingMode(horizontal="circular")


def circular_pad(x: Tensor, pad_w: int) -> Tensor:
    """Wrap ``pad_w`` columns from each side of the last axis onto the other."""
    w = x.shape[-1]
    if pad_w < 0 or pad_w >= w:
        raise ContractError(f"circular pad {pad_w} must be in [0, {w})")
    if pad_w == 0:
        return ops.reshape(x, x.shape)
    data = np.concatenate([x.data[..., w - pad_w:], x.data, x.data[..., :pad_w]], axis=-1)

    def backward(g):
        core = g[..., pad_w:pad_w + w].copy()
        core[..., w - pad_w:] += g[..., :pad_w]
        core[..., :pad_w] += g[..., pad_w + w:]
        return (core,)

    return make_node(data, (x,), backward)


def zero_pad(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    if min(top, bottom, left, right) < 0:
        raise ContractError("negative padding")
    if top == bottom == left == right == 0:
        return ops.reshape(x, x.shape)
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]

    def backward(g):
        return (g[..., top:top + h, left:left + w],)

    return make_node(np.pad(x.data, widths), (x,), backward)


def pad2d(x: Tensor, pad_h: int, pad_w: int, mode: PaddingMode = ZERO) -> Tensor:
    if mode.horizontal == "circular":
        x = circular_pad(x, pad_w)
        return zero_pad(x, pad_h, pad_h, 0, 0)
    return zero_pad(x, pad_h, pad_h, pad_w, pad_w)


def _conv_valid(x: Tensor, kernel: Tensor, stride: int, dilation: int) -> Tensor:
    b, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ContractError(f"kernel expects {k_in} input channels, input has {c_in}")
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    if span_h > h or span_w > w:
        raise ContractError(f"kernel span {(span_h, span_w)} exceeds padded input {(h, w)}")
    h_out = (h - span_h) // stride + 1
    w_out = (w - span_w) // stride + 1
    xd, kd = x.data, kernel.data

    def window(a: int, bb: int) -> tuple[slice, slice]:
        r0, c0 = a * dilation, bb * dilation
        return (slice(r0, r0 + stride * (h_out - 1) + 1, stride),
                slice(c0, c0 + stride * (w_out - 1) + 1, stride))

    # accumulate in [C_out, B, H_out, W_out] to keep tensordot outputs contiguous
    acc = np.zeros((c_out, b, h_out, w_out), dtype=xd.dtype)
    for a in range(kh):
        for bb in range(kw):
            rs, cs = window(a, bb)
            acc += np.tensordot(kd[:, :, a, bb], xd[:, :, rs, cs], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        dx = np.zeros_like(xd)
        dk = np.zeros_like(kd)
        for a in range(kh):
            for bb in range(kw):
                rs, cs = window(a, bb)
                dk[:, :, a, bb] = np.tensordot(gt, xd[:, :, rs, cs], axes=([1, 2, 3], [0, 2, 3]))
                dx[:, :, rs, cs] += np.tensordot(kd[:, :, a, bb], gt, axes=([0], [0])).transpose(1, 0, 2, 3)
        return dx, dk

    return make_node(out, (x, kernel), backward)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: tuple[int, int] | int | None = None,
    mode: PaddingMode = ZERO,
) -> Tensor:
    """Cross-correlate ``x`` [B,C_in,H,W] or [C_in,H,W] with ``kernel`` [C_out,C_in,kh,kw].

    ``padding=None`` selects "same" padding ``dilation * (k - 1) / 2`` per
    axis, which preserves spatial size at stride 1 for odd kernels.
    """
    if stride < 1 or dilation < 1:
        raise ContractError("stride and dilation must be >= 1")
    if kernel.ndim != 4:
        raise ContractError(f"kernel must be 4-d, got {kernel.shape}")
    squeeze = x.ndim == 3
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    elif x.ndim != 4:
        raise ContractError(f"conv2d input must be 3-d or 4-d, got {x.shape}")
    kh, kw = kernel.shape[2:]
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractError("same padding needs odd kernel sizes")
        pad_h, pad_w = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    elif isinstance(padding, int):
        pad_h = pad_w = padding
    else:
        pad_h, pad_w = padding
    x = pad2d(x, pad_h, pad_w, mode)
    out = _conv_valid(x, kernel, stride, dilation)
    if bias is not None:
        out = ops.add_bias(out, bias)
    if squeeze:
        out = ops.reshape(out, out.shape[1:])
    return out
