"""Segmentation losses on range-image class probabilities.

Each loss is one node in the differentiation graph with a hand-written
backward pass. Probabilities are ``[C, H, W]`` (the set losses also accept
``[C, P]``); labels are integer class ids with ``ignore_id`` for unlabeled
pixels, and ``mask`` marks pixels that hold a projected point.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .exceptions import ContractError, EmptyMaskWarning
from .pointcloud import IGNORE_ID
from .tensor import Tensor, ops
from .tensor.core import make_node

FREQ_EPS = 1e-6
LOG_EPS = 1e-12


@dataclass
class ClassStats:
    """Per-class counts, frequencies and inverse-sqrt-frequency weights."""

    counts: np.ndarray
    nu: np.ndarray
    weights: np.ndarray

    def to_text(self) -> str:
        lines = ["# class count nu weight"]
        for c, (n, f, a) in enumerate(zip(self.counts, self.nu, self.weights)):
            lines.append(f"{c} {int(n)} {float(f)!r} {float(a)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClassStats":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        rows.sort(key=lambda r: int(r[0]))
        return cls(
            counts=np.array([int(r[1]) for r in rows], dtype=np.int64),
            nu=np.array([float(r[2]) for r in rows]),
            weights=np.array([float(r[3]) for r in rows]),
        )


@dataclass(frozen=True)
class LossWeights:
    beta_ls: float = 1.5
    beta_wce: float = 1.0
    beta_tv: float = 7.5

    def __post_init__(self):
        for v in (self.beta_ls, self.beta_wce, self.beta_tv):
            if not np.isfinite(v) or v < 0:
                raise ContractError("loss weights must be finite and non-negative")


@dataclass(frozen=True)
class TVConfig:
    """Neighbour step sizes and mixed-norm orders (inner ``p`` over rows, outer ``q``)."""

    step_i: int = 1
    step_j: int = 1
    p: float = 1.0
    q: float = 1.0

    def __post_init__(self):
        if self.step_i < 1 or self.step_j < 1:
            raise ContractError("TV step sizes must be >= 1")
        if self.p < 1 or self.q < 1:
            raise ContractError("TV norm orders must be >= 1")


def class_frequencies(label_stream: Iterable, num_classes: int,
                      ignore_id: int = IGNORE_ID) -> ClassStats:
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_stream:
        labels = np.asarray(getattr(labels, "semantic", labels)).reshape(-1)
        labels = labels[labels != ignore_id]
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractError("label id outside [0, num_classes)")
        counts += np.bincount(labels, minlength=num_classes)
    total = counts.sum()
    if total == 0:
        raise ContractError("no labeled points in the stream")
    nu = counts / total
    return ClassStats(counts, nu, 1.0 / np.sqrt(np.maximum(nu, FREQ_EPS)))


def _flatten(probs: Tensor, labels, mask, ignore_id: int):
    if probs.ndim < 2:
        raise ContractError("probabilities need a class axis and at least one pixel axis")
    n_classes = probs.shape[0]
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    n_pix = int(np.prod(probs.shape[1:]))
    if labels.size != n_pix:
        raise ContractError(f"{labels.size} labels for {n_pix} pixels")
    valid = labels != ignore_id
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.size != n_pix:
            raise ContractError("mask does not match the pixel grid")
        valid &= mask
    bad = valid & ((labels < 0) | (labels >= n_classes))
    if bad.any():
        raise ContractError("label id outside [0, num_classes)")
    return probs.data.reshape(n_classes, n_pix), labels, valid


def _zero_loss(probs: Tensor, name: str) -> Tensor:
    warnings.warn(f"{name}: no valid pixels, loss defined as 0", EmptyMaskWarning, stacklevel=3)
    return make_node(np.zeros((), dtype=probs.dtype), (probs,),
                     lambda g: (np.zeros_like(probs.data),))


def wce_loss(probs: Tensor, labels, mask=None, stats=None, ignore_id: int = IGNORE_ID) -> Tensor:
    """Mean over valid pixels of ``-a[y] * log(max(p_y, 1e-12))``.

    ``stats`` is a :class:`ClassStats` or a weight vector; ``None`` means
    unit weights.
    """
    flat, labels, valid = _flatten(probs, labels, mask, ignore_id)
    n_classes = flat.shape[0]
    if stats is None:
        weights = np.ones(n_classes)
    else:
        weights = np.asarray(getattr(stats, "weights", stats), dtype=np.float64)
    if weights.shape != (n_classes,):
        raise ContractError(f"{weights.shape[0]} class weights for {n_classes} classes")
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return _zero_loss(probs, "wce_loss")
    y = labels[idx]
    py = flat[y, idx]
    clipped = np.maximum(py, LOG_EPS)
    a = weights[y].astype(probs.dtype)
    value = np.asarray(np.mean(-a * np.log(clipped)), dtype=probs.dtype)

    def backward(g):
        d = np.zeros_like(flat)
        d[y, idx] = np.where(py > LOG_EPS, -a / clipped, 0.0) * (g / idx.size)
        return (d.reshape(probs.shape),)

    return make_node(value, (probs,), backward)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard increments for ground-truth indicators sorted by descending error.

    Works on a vector or row-wise on a matrix.
    """
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum(axis=-1, keepdims=True)
    intersection = gts - np.cumsum(gt_sorted, axis=-1)
    union = gts + np.cumsum(1.0 - gt_sorted, axis=-1)
    jaccard = 1.0 - intersection / union
    jaccard[..., 1:] = jaccard[..., 1:] - jaccard[..., :-1]
    return jaccard


def lovasz_softmax(probs: Tensor, labels, mask=None, classes: str = "present",
                   ignore_id: int = IGNORE_ID) -> Tensor:
    """Lovász extension of the per-class Jaccard loss, averaged over classes.

    ``classes="present"`` averages over classes occurring among the valid
    labels; ``"all"`` averages over every class.
    """
    if classes not in ("present", "all"):
        raise ContractError(f"unknown class averaging {classes!r}")
    flat, labels, valid = _flatten(probs, labels, mask, ignore_id)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return _zero_loss(probs, "lovasz_softmax")
    n_classes = flat.shape[0]
    p = flat[:, idx].astype(np.float64)
    fg = (labels[idx][None, :] == np.arange(n_classes)[:, None]).astype(np.float64)
    chosen = fg.any(axis=1) if classes == "present" else np.ones(n_classes, dtype=bool)
    errors = np.abs(fg - p)
    order = np.argsort(-errors, axis=1, kind="stable")
    e_sorted = np.take_along_axis(errors, order, axis=1)
    w = lovasz_grad(np.take_along_axis(fg, order, axis=1))
    per_class = (e_sorted * w).sum(axis=1)
    n_chosen = int(chosen.sum())
    value = np.asarray(per_class[chosen].mean(), dtype=probs.dtype)

    def backward(g):
        d_err = np.zeros_like(errors)
        np.put_along_axis(d_err, order, w, axis=1)
        d_err[~chosen] = 0.0
        d_p = d_err * np.where(fg > 0, -1.0, 1.0) * (float(g) / n_chosen)
        d = np.zeros_like(flat)
        d[:, idx] = d_p
        return (d.reshape(probs.shape),)

    return make_node(value, (probs,), backward)


def _mixed_norm(d: np.ndarray, p: float, q: float):
    """``||D||_{p,q}`` per leading channel plus its gradient w.r.t. ``D``.

    ``D`` is ``[C, rows, cols]``; the inner ``p``-norm runs over rows.
    """
    a = np.abs(d)
    sign = np.sign(d)
    if p == 1 and q == 1:
        return a.sum(axis=(1, 2)), sign
    s = (a ** p).sum(axis=1, keepdims=True)
    t = (s ** (q / p)).sum(axis=2, keepdims=True)
    value = (t ** (1.0 / q)).reshape(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = t ** (1.0 / q - 1.0) * s ** (q / p - 1.0) * a ** (p - 1.0) * sign
    return value, np.nan_to_num(grad, nan=0.0, posinf=0.0, neginf=0.0)


def tv_loss(probs: Tensor, labels, mask=None, cfg: TVConfig = TVConfig(),
            ignore_id: int = IGNORE_ID) -> Tensor:
    """Mismatch between label edges and prediction edges over grid neighbours.

    For each channel, vertical pairs ``(i, i + step_i)`` and horizontal pairs
    ``(j, (j + step_j) mod W)`` whose endpoints are both valid contribute
    ``| |y_a - y_b| - |p_a - p_b| |`` (for ``p = q = 1``). The per-channel
    sums are divided by the number of contributing pairs and added over
    channels.

    ``labels`` is an ``[H, W]`` id image or an ``[C, H, W]`` one-hot/soft
    target.
    """
    if probs.ndim != 3:
        raise ContractError(f"tv_loss needs [C, H, W] probabilities, got {probs.shape}")
    c, h, w = probs.shape
    labels = np.asarray(labels)
    valid = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    if valid.shape != (h, w):
        raise ContractError("mask does not match the pixel grid")
    if labels.shape == (h, w):
        ids = labels.astype(np.int64)
        valid &= ids != ignore_id
        if np.any(valid & ((ids < 0) | (ids >= c))):
            raise ContractError("label id outside [0, num_classes)")
        target = (ids[None] == np.arange(c)[:, None, None]).astype(np.float64)
    elif labels.shape == (c, h, w):
        target = labels.astype(np.float64)
    else:
        raise ContractError(f"labels of shape {labels.shape} do not fit {probs.shape}")
    pd = probs.data.astype(np.float64)
    di, dj = cfg.step_i, cfg.step_j

    if di < h:
        v_mask = (valid[di:] & valid[:-di]).astype(np.float64)
        dv_p = pd[:, di:] - pd[:, :-di]
        dv = (np.abs(target[:, di:] - target[:, :-di]) - np.abs(dv_p)) * v_mask
    else:
        v_mask = np.zeros((0, w))
        dv_p = np.zeros((c, 0, w))
        dv = np.zeros((c, 0, w))
    h_mask = (valid & np.roll(valid, -dj, axis=1)).astype(np.float64)
    dh_p = np.roll(pd, -dj, axis=2) - pd
    dh = (np.abs(np.roll(target, -dj, axis=2) - target) - np.abs(dh_p)) * h_mask

    n_terms = v_mask.sum() + h_mask.sum()
    if n_terms == 0:
        return _zero_loss(probs, "tv_loss")
    norm_v, g_v = _mixed_norm(dv, cfg.p, cfg.q)
    norm_h, g_h = _mixed_norm(dh, cfg.p, cfg.q)
    value = np.asarray((norm_v.sum() + norm_h.sum()) / n_terms, dtype=probs.dtype)

    def backward(g):
        scale = float(g) / n_terms
        # D = |dy| - |dp| masked, so dD/d(dp) = -sign(dp) on contributing pairs
        gv = -g_v * np.sign(dv_p) * v_mask * scale
        gh = -g_h * np.sign(dh_p) * h_mask * scale
        d = np.zeros_like(pd)
        if gv.size:
            d[:, di:] += gv
            d[:, :-di] -= gv
        d += np.roll(gh, dj, axis=2) - gh
        return (d.astype(probs.dtype),)

    return make_node(value, (probs,), backward)


class LossTerms(NamedTuple):
    total: Tensor
    lovasz: Tensor
    wce: Tensor
    tv: Tensor


def compute_losses(probs: Tensor, labels, mask, stats=None,
                   weights: LossWeights = LossWeights(), tv_cfg: TVConfig = TVConfig(),
                   lovasz_classes: str = "present", ignore_id: int = IGNORE_ID) -> LossTerms:
    """All three losses and their weighted sum for one frame."""
    ls = lovasz_softmax(probs, labels, mask, classes=lovasz_classes, ignore_id=ignore_id)
    wce = wce_loss(probs, labels, mask, stats, ignore_id=ignore_id)
    tv = tv_loss(probs, labels, mask, tv_cfg, ignore_id=ignore_id)
    total = ops.add(ops.add(ops.mul(ls, weights.beta_ls), ops.mul(wce, weights.beta_wce)),
                    ops.mul(tv, weights.beta_tv))
    return LossTerms(total, ls, wce, tv)


def total_loss(probs: Tensor, labels, mask, stats=None,
               weights: LossWeights = LossWeights(), tv_cfg: TVConfig = TVConfig(),
               **kwargs) -> Tensor:
    return compute_losses(probs, labels, mask, stats, weights, tv_cfg, **kwargs).total
