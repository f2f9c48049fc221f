"""Ray-cast toy scenes with analytic labels.

A virtual spinning sensor sits 1.73 m above a flat ground and fires one
beam per range-image pixel. Scenes hold boxes ("vehicle"), vertical
cylinders ("pole"), long thin boxes ("wall") and spheres ("vegetation").
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import frame_rng
from .pointcloud import LabelArray, PointCloud
from .projection import SphericalConfig

TOY_CLASSES = ("ground", "vehicle", "pole", "wall", "vegetation")
SENSOR_HEIGHT = 1.73
MAX_RANGE = 60.0
_REMISSION = np.array([0.25, 0.6, 0.45, 0.35, 0.15])


@dataclass(frozen=True)
class SceneConfig:
    vehicles: tuple[int, int] = (3, 6)
    poles: tuple[int, int] = (2, 5)
    walls: tuple[int, int] = (1, 3)
    trees: tuple[int, int] = (2, 5)
    jitter: float = 0.3          # beam direction jitter, fraction of a pixel
    range_noise: float = 0.01    # meters
    remission_noise: float = 0.05


def beam_directions(proj: SphericalConfig, rng: np.random.Generator, jitter: float):
    """Unit direction per pixel, aimed near the pixel center."""
    h, w = proj.height, proj.width
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    uu = u + 0.5 + rng.uniform(-jitter, jitter, size=u.shape) * 0.5
    vv = v + 0.5 + rng.uniform(-jitter, jitter, size=v.shape) * 0.5
    yaw = np.pi * (1.0 - 2.0 * uu / w)
    pitch = (1.0 - vv / h) * proj.fov - proj.fov_down
    d = np.stack([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)], -1)
    return d.reshape(-1, 3)


def _hit_ground(d):
    t = np.full(d.shape[0], np.inf)
    down = d[:, 2] < -1e-9
    t[down] = SENSOR_HEIGHT / -d[down, 2]
    return t


def _hit_box(d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = lo * inv
        t2 = hi * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    ok = (t_far >= t_near) & (t_near > 0)
    return np.where(ok, t_near, np.inf)


def _hit_cylinder(d, cx, cy, radius, z_lo, z_hi):
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2.0 * (d[:, 0] * cx + d[:, 1] * cy)
    c = cx * cx + cy * cy - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = t * d[:, 2]
    ok = (disc >= 0) & (a > 0) & (t > 0) & (z >= z_lo) & (z <= z_hi)
    return np.where(ok, t, np.inf)


def _hit_sphere(d, center, radius):
    b = d @ center
    disc = b * b - (center @ center - radius * radius)
    with np.errstate(invalid="ignore"):
        t = b - np.sqrt(disc)
    ok = (disc >= 0) & (t > 0)
    return np.where(ok, t, np.inf)


def _place(rng, r_lo, r_hi):
    r = rng.uniform(r_lo, r_hi)
    a = rng.uniform(-np.pi, np.pi)
    return r * np.cos(a), r * np.sin(a)


def make_scene(proj: SphericalConfig, seed: int, index: int,
               scene: SceneConfig = SceneConfig()) -> tuple[PointCloud, LabelArray]:
    """One labeled frame; identical ``(seed, index)`` gives identical output."""
    rng = frame_rng(seed, index)
    d = beam_directions(proj, rng, scene.jitter)
    ground_z = -SENSOR_HEIGHT
    hits = [(_hit_ground(d), 0)]
    for _ in range(rng.integers(*scene.vehicles, endpoint=True)):
        cx, cy = _place(rng, 5.0, 20.0)
        half = np.array([rng.uniform(1.8, 2.4), rng.uniform(0.8, 1.0)])
        if rng.random() < 0.5:
            half = half[::-1]
        lo = np.array([cx - half[0], cy - half[1], ground_z])
        hi = np.array([cx + half[0], cy + half[1], ground_z + rng.uniform(1.4, 1.8)])
        hits.append((_hit_box(d, lo, hi), 1))
    for _ in range(rng.integers(*scene.poles, endpoint=True)):
        cx, cy = _place(rng, 4.0, 15.0)
        hits.append((_hit_cylinder(d, cx, cy, rng.uniform(0.15, 0.3), ground_z, 4.0), 2))
    for _ in range(rng.integers(*scene.walls, endpoint=True)):
        cx, cy = _place(rng, 18.0, 30.0)
        length, thick = rng.uniform(8.0, 20.0), 0.5
        half = np.array([length, thick]) / 2 if rng.random() < 0.5 else np.array([thick, length]) / 2
        lo = np.array([cx - half[0], cy - half[1], ground_z])
        hi = np.array([cx + half[0], cy + half[1], ground_z + rng.uniform(3.0, 6.0)])
        hits.append((_hit_box(d, lo, hi), 3))
    for _ in range(rng.integers(*scene.trees, endpoint=True)):
        cx, cy = _place(rng, 6.0, 25.0)
        radius = rng.uniform(1.0, 2.5)
        center = np.array([cx, cy, ground_z + radius + rng.uniform(0.5, 2.0)])
        hits.append((_hit_sphere(d, center, radius), 4))
    t_all = np.stack([t for t, _ in hits])
    cls_all = np.array([c for _, c in hits])
    first = np.argmin(t_all, axis=0)
    t = t_all[first, np.arange(d.shape[0])]
    keep = t < MAX_RANGE
    t = t[keep] + rng.normal(0.0, scene.range_noise, size=int(keep.sum()))
    labels = cls_all[first[keep]]
    xyz = d[keep] * t[:, None]
    rem = np.clip(_REMISSION[labels] + rng.normal(0, scene.remission_noise, labels.size), 0, 1)
    return PointCloud(xyz, rem), LabelArray(labels.astype(np.uint32))


def make_dataset(proj: SphericalConfig, n_frames: int, seed: int = 0,
                 scene: SceneConfig = SceneConfig()):
    return [make_scene(proj, seed, i, scene) for i in range(n_frames)]
