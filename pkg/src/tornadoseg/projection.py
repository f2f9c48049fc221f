"""Spherical range-image projection and bird's-eye-view pillar grids.

Both projections keep exact point <-> cell correspondences so that features
computed on the grid can be gathered back to every point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError
from .pointcloud import PointCloud

DEFAULT_CHANNELS = ("x", "y", "z", "remission", "range")


@dataclass(frozen=True)
class SphericalConfig:
    """Range-image geometry. Angles are in radians, both FOV parts positive."""

    width: int = 2048
    height: int = 64
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ContractError("range image width and height must be positive")
        if self.fov <= 0:
            raise ContractError("vertical field of view must be positive")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @classmethod
    def from_degrees(cls, width: int, height: int, fov_up: float, fov_down: float):
        return cls(width, height, math.radians(fov_up), math.radians(fov_down))


@dataclass
class PointPixelMap:
    u: np.ndarray
    v: np.ndarray
    in_bounds: np.ndarray

    def flat_index(self, width: int) -> np.ndarray:
        """Row-major pixel index per point, ``-1`` for rejected points."""
        return np.where(self.in_bounds, self.v * width + self.u, -1)


@dataclass
class RangeImage:
    """Winner-takes-pixel projection.

    ``channels`` is C x H x W, ``winner_index`` holds the point index owning
    each pixel (``-1`` when empty) and ``range`` is the per-point range.
    """

    channels: np.ndarray
    valid_mask: np.ndarray
    winner_index: np.ndarray
    range: np.ndarray
    channel_names: tuple[str, ...] = DEFAULT_CHANNELS

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid_mask.shape

    def pixel_range(self) -> np.ndarray:
        """H x W range of the winning point, 0 for empty pixels."""
        out = np.zeros(self.valid_mask.shape, dtype=np.float64)
        out[self.valid_mask] = self.range[self.winner_index[self.valid_mask]]
        return out


def pixel_coordinates(xyz: np.ndarray, cfg: SphericalConfig) -> PointPixelMap:
    """Integer (u, v) for every point; zero-range points are rejected."""
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    ok = r > 0
    safe_r = np.where(ok, r, 1.0)
    yaw = np.arctan2(y, x)
    pitch = np.arcsin(np.clip(z / safe_r, -1.0, 1.0))
    u = np.floor(0.5 * (1.0 - yaw / np.pi) * cfg.width)
    v = np.floor((1.0 - (pitch + cfg.fov_down) / cfg.fov) * cfg.height)
    u = np.clip(u, 0, cfg.width - 1).astype(np.int64)
    v = np.clip(v, 0, cfg.height - 1).astype(np.int64)
    u[~ok] = 0
    v[~ok] = 0
    return PointPixelMap(u, v, ok)


def select_winners(flat_pixel: np.ndarray, ranges: np.ndarray, n_pixels: int) -> np.ndarray:
    """Per pixel, the point index with the smallest range (lower index on ties)."""
    winner = np.full(n_pixels, -1, dtype=np.int64)
    candidates = np.flatnonzero(flat_pixel >= 0)
    if candidates.size == 0:
        return winner
    order = np.lexsort((candidates, ranges[candidates], flat_pixel[candidates]))
    ranked = candidates[order]
    pix = flat_pixel[ranked]
    first = np.ones(ranked.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    winner[pix[first]] = ranked[first]
    return winner


def spherical_project(cloud: PointCloud, cfg: SphericalConfig,
                      channel_source: np.ndarray | None = None,
                      channel_names: tuple[str, ...] | None = None):
    """Project a cloud onto the range image.

    Parameters
    ----------
    cloud : PointCloud
    cfg : SphericalConfig
    channel_source : ndarray, optional
        N x C per-point features written into winning pixels. Defaults to
        ``(x, y, z, remission, range)``.

    Returns
    -------
    (RangeImage, PointPixelMap)
    """
    ranges = cloud.range
    if channel_source is None:
        channel_source = np.column_stack([cloud.xyz, cloud.remission, ranges]).astype(np.float32)
        channel_names = DEFAULT_CHANNELS
    channel_source = np.asarray(channel_source)
    if channel_source.ndim != 2 or channel_source.shape[0] != cloud.count:
        raise ContractError(
            f"channel source of shape {channel_source.shape} does not match {cloud.count} points"
        )
    if channel_names is None:
        channel_names = tuple(f"f{i}" for i in range(channel_source.shape[1]))
    pmap = pixel_coordinates(cloud.xyz, cfg)
    n_pix = cfg.height * cfg.width
    winner = select_winners(pmap.flat_index(cfg.width), ranges, n_pix)
    valid = winner >= 0
    flat = np.zeros((n_pix, channel_source.shape[1]), dtype=channel_source.dtype)
    flat[valid] = channel_source[winner[valid]]
    channels = flat.T.reshape(-1, cfg.height, cfg.width)
    image = RangeImage(
        channels=np.ascontiguousarray(channels),
        valid_mask=valid.reshape(cfg.height, cfg.width),
        winner_index=winner.reshape(cfg.height, cfg.width),
        range=ranges,
        channel_names=tuple(channel_names),
    )
    return image, pmap


@dataclass(frozen=True)
class PillarGridConfig:
    """BEV grid: cell size, lower corner and number of cells per axis.

    The defaults span the published crop box with 0.3125 m cells (512 x 512)
    and one 10 m tall pillar per cell.
    """

    voxel_size: tuple[float, float, float] = (0.3125, 0.3125, 10.0)
    origin: tuple[float, float, float] = (-80.0, -80.0, -5.0)
    grid_size: tuple[int, int] = (512, 512)

    def __post_init__(self):
        if min(self.voxel_size) <= 0:
            raise ContractError("voxel sizes must be positive")
        if min(self.grid_size) <= 0:
            raise ContractError("grid dimensions must be positive")

    @property
    def n_cells(self) -> int:
        return self.grid_size[0] * self.grid_size[1]


@dataclass
class PillarGrid:
    """Pillar assignment of each point.

    ``pillar_index`` is ``ix + Gx * iy`` or ``-1`` outside the grid;
    ``offsets`` are (coordinate - cell center) / voxel size per axis.
    """

    pillar_index: np.ndarray
    offsets: np.ndarray
    config: PillarGridConfig = field(default_factory=PillarGridConfig)

    @property
    def occupied(self) -> np.ndarray:
        return np.unique(self.pillar_index[self.pillar_index >= 0])


def pillar_assign(cloud: PointCloud, cfg: PillarGridConfig = PillarGridConfig()) -> PillarGrid:
    """Assign every point to a full-height pillar.

    Cells are half-open except along the far edge of the grid, which is
    closed so that points on the crop boundary stay inside.
    """
    xyz = cloud.xyz.astype(np.float64)
    size = np.asarray(cfg.voxel_size, dtype=np.float64)
    origin = np.asarray(cfg.origin, dtype=np.float64)
    gx, gy = cfg.grid_size
    rel = (xyz - origin) / size
    cell = np.floor(rel[:, :2]).astype(np.int64)
    for axis, extent in ((0, gx), (1, gy)):
        on_far_edge = rel[:, axis] == extent
        cell[on_far_edge, axis] = extent - 1
    inside = (cell[:, 0] >= 0) & (cell[:, 0] < gx) & (cell[:, 1] >= 0) & (cell[:, 1] < gy)
    index = np.where(inside, cell[:, 0] + gx * cell[:, 1], -1)
    offsets = np.empty_like(xyz)
    offsets[:, :2] = rel[:, :2] - (cell + 0.5)
    offsets[:, 2] = rel[:, 2] - 0.5
    return PillarGrid(index, offsets.astype(np.float32), cfg)


def scatter_pool(point_features: np.ndarray, grid: PillarGrid, mode: str = "max") -> np.ndarray:
    """Pool point features into a C x Gy x Gx BEV map (empty cells are 0)."""
    feats = np.asarray(point_features)
    if feats.ndim != 2 or feats.shape[0] != grid.pillar_index.shape[0]:
        raise ContractError("feature rows must align with the grid's points")
    gx, gy = grid.config.grid_size
    idx = grid.pillar_index
    keep = idx >= 0
    out = np.zeros((gx * gy, feats.shape[1]), dtype=feats.dtype)
    if mode == "max":
        pooled = np.full_like(out, -np.inf)
        np.maximum.at(pooled, idx[keep], feats[keep])
        hit = np.isfinite(pooled[:, 0]) if feats.shape[1] else np.zeros(gx * gy, bool)
        out[hit] = pooled[hit]
    elif mode == "mean":
        counts = np.bincount(idx[keep], minlength=gx * gy)
        np.add.at(out, idx[keep], feats[keep])
        out /= np.maximum(counts, 1)[:, None]
    else:
        raise ContractError(f"unknown pooling mode {mode!r}")
    return np.ascontiguousarray(out.T.reshape(feats.shape[1], gy, gx))


def gather_to_points(cell_features: np.ndarray, index_map: np.ndarray) -> np.ndarray:
    """Row ``i`` is the feature vector of the cell holding point ``i``.

    ``cell_features`` is C x (any spatial shape) and ``index_map`` the
    row-major flat cell index per point; ``-1`` yields a zero row.
    """
    cell_features = np.asarray(cell_features)
    flat = cell_features.reshape(cell_features.shape[0], -1).T
    index_map = np.asarray(index_map, dtype=np.int64)
    if index_map.size and index_map.max() >= flat.shape[0]:
        raise ContractError("cell index out of range")
    out = np.zeros((index_map.size, flat.shape[1]), dtype=flat.dtype)
    ok = index_map >= 0
    out[ok] = flat[index_map[ok]]
    return out
