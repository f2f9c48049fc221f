import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tornadoseg.exceptions import ContractError
from tornadoseg.postprocess import KnnConfig, knn_refine, window_offsets


def _oracle(labels, ranges, valid, u, v, r, p):
    return oracles.knn_vote(labels, ranges, valid, u, v, r, p["kernel_size"], p["k"], p["sigma"],
                            p["cutoff"], chebyshev=p["distance"] == "chebyshev")


def test_config_validation():
    for bad in (dict(kernel_size=4), dict(k=0), dict(cutoff=0.0), dict(distance="manhattan")):
        with pytest.raises(ContractError):
            KnnConfig(**bad)


def test_window_scan_order():
    dv, du, d2 = window_offsets(KnnConfig(kernel_size=3))
    assert list(zip(dv.tolist(), du.tolist()))[:4] == [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    assert d2.tolist() == [1, 1, 1, 1, 0, 1, 1, 1, 1]
    assert window_offsets(KnnConfig(kernel_size=3, distance="euclidean"))[2].tolist()[:3] == [2, 1, 2]


def test_self_vote_and_degenerate_window():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, (4, 6))
    ranges = rng.uniform(5, 10, (4, 6))
    valid = np.ones((4, 6), bool)
    v, u = np.divmod(np.arange(24), 6)
    own = knn_refine(labels, ranges, valid, u, v, ranges[v, u], KnnConfig(kernel_size=1, k=1))
    np.testing.assert_array_equal(own, labels[v, u])
    far = knn_refine(labels, ranges, valid, u, v, ranges[v, u] + 50.0, KnnConfig(kernel_size=1))
    np.testing.assert_array_equal(far, labels[v, u])


def _competing_window():
    # center invalid; label 1 on the four corners at +0.2 m, label 2 on three
    # direct neighbours at +0.9 m
    labels = np.zeros((5, 5), int)
    ranges = np.full((5, 5), 50.0)
    valid = np.zeros((5, 5), bool)
    for vv, uu in [(0, 0), (0, 4), (4, 0), (4, 4)]:
        labels[vv, uu], ranges[vv, uu], valid[vv, uu] = 1, 10.2, True
    for vv, uu in [(1, 2), (2, 1), (3, 2)]:
        labels[vv, uu], ranges[vv, uu], valid[vv, uu] = 2, 10.9, True
    return labels, ranges, valid


# (k, cutoff) -> label; label 2 wins once any of its ring-1 votes is included
COMPETING_TABLE = {(5, 1.0): 2, (3, 1.0): 1, (4, 1.0): 1, (5, 0.5): 1, (7, 1.0): 2, (8, 1.0): 2}


@pytest.mark.parametrize("k,cutoff", sorted(COMPETING_TABLE))
def test_two_competing_labels_table(k, cutoff):
    labels, ranges, valid = _competing_window()
    params = dict(kernel_size=5, k=k, sigma=1.0, cutoff=cutoff, distance="chebyshev")
    got = knn_refine(labels, ranges, valid, [2], [2], [10.0], KnnConfig(**params))
    assert got[0] == COMPETING_TABLE[(k, cutoff)]
    assert _oracle(labels, ranges, valid, [2], [2], [10.0], params)[0] == got[0]


def test_circular_window_reaches_far_columns():
    labels = np.zeros((1, 10), int)
    ranges = np.full((1, 10), 99.0)
    valid = np.zeros((1, 10), bool)
    labels[0, 8], ranges[0, 8], valid[0, 8] = 3, 5.0, True
    assert knn_refine(labels, ranges, valid, [0], [0], [5.0], num_classes=4)[0] == 3
    labels[0, 8], labels[0, 7], ranges[0, 7], valid[0, 7], valid[0, 8] = 0, 3, 5.0, True, False
    assert knn_refine(labels, ranges, valid, [0], [0], [5.0], num_classes=4)[0] == 0


def test_out_of_bounds_point_is_rejected():
    with pytest.raises(ContractError):
        knn_refine(np.zeros((2, 2), int), np.ones((2, 2)), np.ones((2, 2), bool), [2], [0], [1.0])


@pytest.mark.parametrize("block", range(10))
def test_matches_per_point_oracle_on_random_configurations(block):
    rng = np.random.default_rng([2024, block])
    for _ in range(50):
        labels, ranges, valid, u, v, r, classes, params = oracles.random_knn_case(rng)
        got = knn_refine(labels, ranges, valid, u, v, r, KnnConfig(**params), num_classes=classes)
        np.testing.assert_array_equal(got, _oracle(labels, ranges, valid, u, v, r, params))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_output_comes_from_window_and_uniform_windows_are_stable(seed):
    rng = np.random.default_rng(seed)
    labels, ranges, valid, u, v, r, classes, params = oracles.random_knn_case(rng)
    cfg = KnnConfig(**params)
    out = knn_refine(labels, ranges, valid, u, v, r, cfg, num_classes=classes)
    half = cfg.kernel_size // 2
    h, w = labels.shape
    for i in range(len(u)):
        rows = range(max(0, v[i] - half), min(h, v[i] + half + 1))
        cols = [(u[i] + d) % w for d in range(-half, half + 1)]
        seen = {int(labels[a, b]) for a in rows for b in cols}
        assert out[i] in seen
    uniform = np.full_like(labels, int(labels[0, 0]))
    winners = knn_refine(uniform, ranges, valid, u, v, ranges[v, u], cfg, num_classes=classes)
    assert np.all(winners == labels[0, 0])
