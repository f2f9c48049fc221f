"""Range-gated nearest-neighbour label refinement on the range image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError


@dataclass(frozen=True)
class KnnConfig:
    """Window side (pixels), neighbour count, Gaussian width (pixels) and range cutoff (m)."""

    kernel_size: int = 5
    k: int = 5
    sigma: float = 1.0
    cutoff: float = 1.0
    distance: str = "chebyshev"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ContractError("kernel_size must be odd and >= 1")
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.cutoff <= 0 or self.sigma <= 0:
            raise ContractError("cutoff and sigma must be positive")
        if self.distance not in ("chebyshev", "euclidean"):
            raise ContractError(f"unknown pixel distance {self.distance!r}")


def window_offsets(cfg: KnnConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row/column offsets in scan order and their squared pixel distance."""
    half = cfg.kernel_size // 2
    dv, du = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    dv, du = dv.reshape(-1), du.reshape(-1)
    if cfg.distance == "chebyshev":
        d2 = np.maximum(np.abs(dv), np.abs(du)) ** 2
    else:
        d2 = dv ** 2 + du ** 2
    return dv, du, d2


def knn_refine(label_image, pixel_range, valid_mask, u, v, r, cfg: KnnConfig = KnnConfig(),
               num_classes: int | None = None) -> np.ndarray:
    """Relabel every point by a weighted vote over nearby range-image pixels.

    For each point, valid pixels in the ``kernel_size`` window around
    ``(v, u)`` (columns wrap around) whose range differs from the point's by
    at most ``cutoff`` are candidates. The ``k`` candidates with the smallest
    range difference (earlier scan position on ties) vote with weight
    ``exp(-d^2 / (2 sigma^2))``, ``d`` being the pixel distance to the window
    center. Class scores are accumulated ring by ring in increasing distance.
    Ties go to the class with the smallest range difference among its voters,
    then to the smaller class id. Points without candidates keep the label of
    their own pixel.
    """
    labels = np.asarray(label_image, dtype=np.int64)
    rng_img = np.asarray(pixel_range, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    h, w = labels.shape
    if rng_img.shape != (h, w) or valid.shape != (h, w):
        raise ContractError("label, range and mask images must share a shape")
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    r = np.asarray(r, dtype=np.float64)
    if np.any((u < 0) | (u >= w) | (v < 0) | (v >= h)):
        raise ContractError("point pixel coordinates out of bounds")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    n = u.size

    dv, du, d2 = window_offsets(cfg)
    rows = v[:, None] + dv[None, :]
    cols = np.mod(u[:, None] + du[None, :], w)
    inside = (rows >= 0) & (rows < h)
    rows_c = np.clip(rows, 0, h - 1)
    cand = inside & valid[rows_c, cols]
    diff = np.abs(rng_img[rows_c, cols] - r[:, None])
    cand &= diff <= cfg.cutoff
    diff = np.where(cand, diff, np.inf)
    cand_labels = labels[rows_c, cols]

    k = min(cfg.k, diff.shape[1])
    order = np.argsort(diff, axis=1, kind="stable")[:, :k]
    sel_diff = np.take_along_axis(diff, order, axis=1)
    sel_ok = np.isfinite(sel_diff)
    sel_label = np.take_along_axis(cand_labels, order, axis=1)

    levels, sel_level = np.unique(d2, return_inverse=True)
    sel_level = sel_level[order]
    counts = np.zeros((n, num_classes, levels.size), dtype=np.int64)
    pi = np.broadcast_to(np.arange(n)[:, None], order.shape)
    np.add.at(counts, (pi[sel_ok], sel_label[sel_ok], sel_level[sel_ok]), 1)
    weights = np.exp(-levels / (2.0 * cfg.sigma ** 2))
    score = np.zeros((n, num_classes))
    for lv in range(levels.size):
        score += counts[:, :, lv] * weights[lv]

    best_diff = np.full((n, num_classes), np.inf)
    np.minimum.at(best_diff, (pi[sel_ok], sel_label[sel_ok]), sel_diff[sel_ok])
    voted = counts.sum(axis=2) > 0
    top = np.where(voted, score, -np.inf).max(axis=1, keepdims=True)
    tied = voted & (score == top)
    tie_diff = np.where(tied, best_diff, np.inf)
    tied &= tie_diff == tie_diff.min(axis=1, keepdims=True)
    winner = np.argmax(tied, axis=1)

    has_vote = sel_ok.any(axis=1)
    return np.where(has_vote, winner, labels[v, u])
