import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import FIXTURES
from tornadoseg.exceptions import ContractError, FormatError, MappingError
from tornadoseg.pointcloud import (
    IGNORE_ID,
    SEMANTIC_KITTI_MAP,
    CropBounds,
    LabelArray,
    PointCloud,
    inverse_mapping,
    read_kitti_bin,
    read_label_file,
    remap_labels,
    truncate_cloud,
    write_kitti_bin,
    write_label_file,
)


def test_read_bin_decodes_quadruples(tmp_path):
    path = tmp_path / "a.bin"
    path.write_bytes(struct.pack("<8f", 1, 0, 0, 0.5, 0, 1, 0, 0.2))
    cloud = read_kitti_bin(path)
    assert cloud.count == 2
    np.testing.assert_array_equal(cloud.xyz[0], [1, 0, 0])
    assert cloud.remission[1] == np.float32(0.2)


def test_read_bin_empty_and_malformed(tmp_path):
    (tmp_path / "empty.bin").write_bytes(b"")
    assert read_kitti_bin(tmp_path / "empty.bin").count == 0
    (tmp_path / "bad.bin").write_bytes(b"\0" * 17)
    with pytest.raises(FormatError):
        read_kitti_bin(tmp_path / "bad.bin")


def test_read_label_bit_fields(tmp_path):
    path = tmp_path / "a.label"
    path.write_bytes(struct.pack("<2I", 0x00030028, 0))
    labels = read_label_file(path)
    assert labels.semantic.tolist() == [0x28, 0]
    assert labels.instance.tolist() == [3, 0]
    (tmp_path / "bad.label").write_bytes(b"\0" * 6)
    with pytest.raises(FormatError):
        read_label_file(tmp_path / "bad.label")


@pytest.mark.parametrize("name", sorted(p.name for p in (FIXTURES / "scans").glob("*.bin")))
def test_bin_fixture_roundtrip(tmp_path, name):
    src = FIXTURES / "scans" / name
    out = tmp_path / name
    write_kitti_bin(out, read_kitti_bin(src))
    assert out.read_bytes() == src.read_bytes()


@pytest.mark.parametrize("name", sorted(p.name for p in (FIXTURES / "labels").glob("*.label")))
def test_label_fixture_roundtrip(tmp_path, name):
    src = FIXTURES / "labels" / name
    out = tmp_path / name
    write_label_file(out, read_label_file(src))
    assert out.read_bytes() == src.read_bytes()


def test_cloud_validation():
    with pytest.raises(ContractError):
        PointCloud(np.zeros((3, 3)), np.zeros(2))
    with pytest.raises(ContractError):
        PointCloud(np.array([[np.nan, 0, 0]]), np.zeros(1))
    with pytest.raises(ContractError):
        LabelArray(np.zeros(3), np.zeros(2))


def test_remap_examples():
    out = remap_labels(LabelArray([10, 40]), {10: 0, 40: 8})
    assert out.semantic.tolist() == [0, 8]
    assert remap_labels(LabelArray([0]), {0: IGNORE_ID}).semantic.tolist() == [IGNORE_ID]
    with pytest.raises(MappingError):
        remap_labels(LabelArray([999]), {0: 0})
    assert remap_labels(LabelArray([999]), {0: 0}, default=IGNORE_ID).semantic.tolist() == [IGNORE_ID]


def test_semantic_kitti_map_covers_nineteen_classes():
    train_ids = set(SEMANTIC_KITTI_MAP.values()) - {IGNORE_ID}
    assert train_ids == set(range(19))
    inv = inverse_mapping(SEMANTIC_KITTI_MAP)
    assert inv[IGNORE_ID] == 0
    assert all(SEMANTIC_KITTI_MAP[inv[t]] == t for t in range(19))


@given(st.lists(st.sampled_from(sorted(SEMANTIC_KITTI_MAP)), max_size=50))
def test_remap_then_identity_is_single_remap(raw):
    once = remap_labels(LabelArray(raw), SEMANTIC_KITTI_MAP)
    identity = {t: t for t in set(SEMANTIC_KITTI_MAP.values())}
    twice = remap_labels(once, identity)
    np.testing.assert_array_equal(once.semantic, twice.semantic)


def test_truncate_examples():
    cloud = PointCloud(np.array([[0, 0, 0], [100, 0, 0], [80, 80, 5]]), np.zeros(3))
    labels = LabelArray([1, 2, 3])
    out, lab = truncate_cloud(cloud, labels)
    np.testing.assert_array_equal(out.xyz, [[0, 0, 0], [80, 80, 5]])
    assert lab.semantic.tolist() == [1, 3]
    inside = PointCloud(np.ones((4, 3)), np.arange(4) / 4)
    same, _ = truncate_cloud(inside)
    np.testing.assert_array_equal(same.xyz, inside.xyz)
    with pytest.raises(ContractError):
        CropBounds(x_range=(1.0, 1.0))


coords = arrays(np.float32, st.tuples(st.integers(0, 40), st.just(3)),
                elements=st.floats(-150, 150, width=32))


@settings(max_examples=60)
@given(coords)
def test_truncate_is_idempotent(xyz):
    cloud = PointCloud(xyz, np.zeros(len(xyz)))
    once, _ = truncate_cloud(cloud)
    twice, _ = truncate_cloud(once)
    np.testing.assert_array_equal(once.xyz, twice.xyz)
    assert np.all(np.abs(once.xyz[:, :2]) <= 80) and np.all(np.abs(once.xyz[:, 2]) <= 5)


def test_label_write_rejects_wide_values(tmp_path):
    with pytest.raises(ContractError):
        write_label_file(tmp_path / "x.label", LabelArray([1 << 16]))
