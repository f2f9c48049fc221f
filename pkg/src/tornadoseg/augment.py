"""Training-time point cloud augmentation.

Random streams come from :func:`frame_rng`: a Philox counter-based generator
keyed by ``SeedSequence([seed, frame_index])``, so each frame's draws are
reproducible independently of worker scheduling. Draw order per call is
documented on each function so the sampling can be replayed exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError
from .pointcloud import LabelArray, PointCloud


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation ranges (degrees / meters); defaults follow the published setup."""

    drop_max_fraction: float = 0.2
    rot_ranges: tuple[tuple[float, float], ...] = ((-5.0, 5.0), (-5.0, 5.0), (-180.0, 180.0))
    trans_ranges: tuple[tuple[float, float], ...] = ((-5.0, 5.0), (-3.0, 3.0), (-1.0, 1.0))
    flip_axis: str = "x"
    drop_probability: float = 0.5
    rigid_probability: float = 0.5
    flip_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.drop_max_fraction <= 1.0:
            raise ContractError("drop_max_fraction must lie in [0, 1]")
        for p in (self.drop_probability, self.rigid_probability, self.flip_probability):
            if not 0.0 <= p <= 1.0:
                raise ContractError("augmentation probabilities must lie in [0, 1]")
        for ranges in (self.rot_ranges, self.trans_ranges):
            if len(ranges) != 3 or any(lo > hi for lo, hi in ranges):
                raise ContractError("ranges must be three (min, max) pairs with min <= max")
        if self.flip_axis != "x":
            raise ContractError("only flipping along the x axis is supported")


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, frame_index])))


def random_drop(cloud: PointCloud, labels: LabelArray | None, max_fraction: float,
                rng: np.random.Generator, fraction: float | None = None):
    """Remove a random fraction of the points.

    Draws ``f = rng.uniform(0, max_fraction)`` (skipped when ``fraction`` is
    given), then ``rng.choice(N, N - floor(f * N), replace=False)``; the kept
    indices are sorted so point order is preserved.
    """
    if not 0.0 <= max_fraction <= 1.0:
        raise ContractError("max_fraction must lie in [0, 1]")
    n = cloud.count
    f = rng.uniform(0.0, max_fraction) if fraction is None else fraction
    n_keep = n - int(math.floor(f * n))
    keep = np.sort(rng.choice(n, size=n_keep, replace=False))
    return cloud.subset(keep), (labels.subset(keep) if labels is not None else None)


def rotation_matrix(angles_deg) -> np.ndarray:
    """``Rz(gamma) @ Ry(beta) @ Rx(alpha)`` for angles ``(alpha, beta, gamma)`` in degrees."""
    a, b, g = np.radians(np.asarray(angles_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(g), -np.sin(g), 0], [np.sin(g), np.cos(g), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rigid_transform(cloud: PointCloud, angles_deg, translation) -> PointCloud:
    rot = rotation_matrix(angles_deg)
    xyz = cloud.xyz.astype(np.float64) @ rot.T + np.asarray(translation, dtype=np.float64)
    return PointCloud(xyz, cloud.remission.copy())


def random_rigid(cloud: PointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    """Rotate then translate the whole cloud.

    Draws three angles ``rng.uniform(lo, hi)`` for x, y, z (in that order)
    followed by three translations.
    """
    angles = [rng.uniform(lo, hi) for lo, hi in cfg.rot_ranges]
    shift = [rng.uniform(lo, hi) for lo, hi in cfg.trans_ranges]
    return rigid_transform(cloud, angles, shift)


def mirror_y(cloud: PointCloud) -> PointCloud:
    xyz = cloud.xyz.copy()
    xyz[:, 1] = -xyz[:, 1]
    return PointCloud(xyz, cloud.remission.copy())


def random_flip(cloud: PointCloud, rng: np.random.Generator, probability: float = 0.5) -> PointCloud:
    """Mirror across the x-z plane when ``rng.random() < probability``."""
    return mirror_y(cloud) if rng.random() < probability else cloud


def augment_pipeline(cloud: PointCloud, labels: LabelArray | None, cfg: AugmentConfig,
                     rng: np.random.Generator):
    """Drop, rigid motion and flip, each gated by an independent ``rng.random() < p``.

    The gate for an augmentation is drawn immediately before that
    augmentation's own draws.
    """
    if rng.random() < cfg.drop_probability:
        cloud, labels = random_drop(cloud, labels, cfg.drop_max_fraction, rng)
    if rng.random() < cfg.rigid_probability:
        cloud = random_rigid(cloud, cfg, rng)
    cloud = random_flip(cloud, rng, cfg.flip_probability)
    return cloud, labels
