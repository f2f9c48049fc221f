"""Point cloud and label I/O for the SemanticKITTI binary formats.

Scans are packed little-endian float32 quadruples ``(x, y, z, remission)``;
labels are little-endian uint32 words with the semantic class in the low 16
bits and the instance id in the high 16 bits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import ContractError, FormatError, MappingError

IGNORE_ID = 255

# raw SemanticKITTI id -> training id in [0, 19); 255 marks ignored classes
SEMANTIC_KITTI_MAP: dict[int, int] = {
    0: 255, 1: 255, 10: 0, 11: 1, 13: 4, 15: 2, 16: 4, 18: 3, 20: 4, 30: 5, 31: 6,
    32: 7, 40: 8, 44: 9, 48: 10, 49: 11, 50: 12, 51: 13, 52: 255, 60: 8, 70: 14,
    71: 15, 72: 16, 80: 17, 81: 18, 99: 255, 252: 0, 253: 6, 254: 5, 255: 7,
    256: 4, 257: 4, 258: 3, 259: 4,
}

SEMANTIC_KITTI_CLASSES = (
    "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "bicyclist",
    "motorcyclist", "road", "parking", "sidewalk", "other-ground", "building", "fence",
    "vegetation", "trunk", "terrain", "pole", "traffic-sign",
)


@dataclass
class PointCloud:
    """``N`` points: coordinates in meters and remission in [0, 1]."""

    xyz: np.ndarray
    remission: np.ndarray

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        self.remission = np.asarray(self.remission, dtype=np.float32).reshape(-1)
        if self.xyz.shape[0] != self.remission.shape[0]:
            raise ContractError(
                f"xyz has {self.xyz.shape[0]} points but remission has {self.remission.shape[0]}"
            )
        if not np.all(np.isfinite(self.xyz)):
            raise ContractError("point coordinates must be finite")

    @property
    def count(self) -> int:
        return self.xyz.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def range(self) -> np.ndarray:
        return np.linalg.norm(self.xyz.astype(np.float64), axis=1)

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.xyz[index], self.remission[index])

    def to_array(self) -> np.ndarray:
        """``N x 4`` float32 array ``(x, y, z, remission)``."""
        return np.concatenate([self.xyz, self.remission[:, None]], axis=1)

    @classmethod
    def from_array(cls, arr) -> "PointCloud":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] not in (3, 4):
            raise ContractError(f"expected an N x 3 or N x 4 array, got {arr.shape}")
        rem = arr[:, 3] if arr.shape[1] == 4 else np.zeros(arr.shape[0], np.float32)
        return cls(arr[:, :3], rem)


@dataclass
class LabelArray:
    semantic: np.ndarray
    instance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64).reshape(-1)
        if self.instance is None:
            self.instance = np.zeros_like(self.semantic)
        self.instance = np.asarray(self.instance, dtype=np.int64).reshape(-1)
        if self.semantic.shape != self.instance.shape:
            raise ContractError("semantic and instance arrays differ in length")

    def __len__(self) -> int:
        return self.semantic.shape[0]

    def subset(self, index) -> "LabelArray":
        return LabelArray(self.semantic[index], self.instance[index])


@dataclass(frozen=True)
class CropBounds:
    """Closed axis-aligned box; defaults are the published training crop."""

    x_range: tuple[float, float] = (-80.0, 80.0)
    y_range: tuple[float, float] = (-80.0, 80.0)
    z_range: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ContractError(f"{name} must satisfy min < max, got {(lo, hi)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_range, self.y_range, self.z_range], dtype=np.float64)


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def read_kitti_bin(path) -> PointCloud:
    blob = _read_bytes(path)
    if len(blob) % 16:
        raise FormatError(f"{path}: {len(blob)} bytes is not a multiple of 16")
    arr = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)
    return PointCloud(arr[:, :3], arr[:, 3])


def write_kitti_bin(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(cloud.to_array().astype("<f4").tobytes())


def read_label_file(path) -> LabelArray:
    blob = _read_bytes(path)
    if len(blob) % 4:
        raise FormatError(f"{path}: {len(blob)} bytes is not a multiple of 4")
    words = np.frombuffer(blob, dtype="<u4").astype(np.int64)
    return LabelArray(words & 0xFFFF, words >> 16)


def write_label_file(path, labels: LabelArray) -> None:
    sem = labels.semantic
    inst = labels.instance
    if sem.size and (sem.min() < 0 or sem.max() > 0xFFFF or inst.min() < 0 or inst.max() > 0xFFFF):
        raise ContractError("label values must fit in 16 bits")
    words = (inst.astype(np.uint32) << 16) | sem.astype(np.uint32)
    Path(path).write_bytes(words.astype("<u4").tobytes())


def remap_labels(labels: LabelArray, mapping: Mapping[int, int],
                 default: int | None = None) -> LabelArray:
    """Translate raw semantic ids through ``mapping``.

    Ids missing from the mapping take ``default``; with no default they raise
    :class:`MappingError`.
    """
    sem = labels.semantic
    if sem.size == 0:
        return LabelArray(sem.copy(), labels.instance.copy())
    size = max(int(sem.max()), max(mapping, default=0)) + 1
    lut = np.full(size, -1, dtype=np.int64)
    for raw, train in mapping.items():
        lut[int(raw)] = int(train)
    out = lut[sem]
    missing = out < 0
    if missing.any():
        if default is None:
            raise MappingError(f"unmapped label ids {sorted(set(sem[missing].tolist()))}")
        out[missing] = default
    return LabelArray(out, labels.instance.copy())


def inverse_mapping(mapping: Mapping[int, int], ignore_id: int = IGNORE_ID) -> dict[int, int]:
    """Training id -> smallest raw id mapping to it; the ignore id exports as 0."""
    inverse: dict[int, int] = {ignore_id: 0}
    for raw in sorted(mapping):
        train = mapping[raw]
        if train != ignore_id:
            inverse.setdefault(train, raw)
    return inverse


def truncate_cloud(cloud: PointCloud, labels: LabelArray | None = None,
                   bounds: CropBounds = CropBounds()):
    """Keep points inside the closed crop box, preserving order."""
    box = bounds.as_array()
    xyz = cloud.xyz.astype(np.float64)
    inside = np.all((xyz >= box[:, 0]) & (xyz <= box[:, 1]), axis=1)
    idx = np.flatnonzero(inside)
    return cloud.subset(idx), (labels.subset(idx) if labels is not None else None)
