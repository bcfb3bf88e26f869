import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ascn.cloudio import PointCloud
from ascn.errors import DegenerateCloud, InvalidParam
from ascn.spatial import (SpatialIndex, build_index, k_nearest, max_distance, receptive_field,
                          receptive_fields)
from oracles import brute_knn


def test_hand_example():
    c = PointCloud([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    assert k_nearest(build_index(c), 0, 2) == [1, 2]


def test_single_point_cloud():
    idx = build_index(PointCloud([[1, 1, 1]]))
    assert k_nearest(idx, 0, 5) == []
    assert idx.knn_table(3).shape == (1, 0)


def test_collinear_builds():
    c = PointCloud([[0, 0, 0], [1, 1, 1], [2, 2, 2]])
    assert k_nearest(build_index(c), 1, 2) == [0, 2]


def test_thousand_points_match_brute_force():
    pts = np.random.default_rng(0).random((1000, 3))
    idx = build_index(PointCloud(pts))
    table = idx.knn_table(10)
    for q in range(0, 1000, 7):
        assert table[q].tolist() == brute_knn(pts, q, 10)


def test_ties_break_on_lower_index():
    # integer lattice: many exactly equal distances
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    perm = np.random.default_rng(1).permutation(len(g))
    pts = g[perm]
    idx = build_index(PointCloud(pts))
    table = idx.knn_table(10)
    for q in range(len(pts)):
        want = brute_knn(pts, q, 10)
        assert table[q].tolist() == want
        assert k_nearest(idx, q, 10) == want


def test_duplicate_points():
    pts = np.array([[0, 0, 0]] * 5 + [[1, 0, 0]] * 3, dtype=float)
    idx = build_index(PointCloud(pts))
    for q in range(8):
        assert k_nearest(idx, q, 6) == brute_knn(pts, q, 6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(1, 12), st.integers(0, 2**32 - 1), st.booleans())
def test_knn_property(n, k, seed, snap):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 3))
    if snap:
        pts = np.round(pts * 3) / 3
    idx = build_index(PointCloud(pts))
    table = idx.knn_table(k)
    assert table.shape == (n, min(k, n - 1))
    for q in range(n):
        assert table[q].tolist() == brute_knn(pts, q, k)


def test_bad_k():
    with pytest.raises(InvalidParam):
        k_nearest(build_index(PointCloud([[0, 0, 0], [1, 0, 0]])), 0, 0)


# --- receptive fields ------------------------------------------------------

def test_field_hand_example():
    c = PointCloud([[0, 0, 0], [2, 0, 0]])
    rf = receptive_field(c, build_index(c), 0, 1, 3)
    assert rf.directions.tolist() == [[2, 0, 0], [0, 0, 0], [0, 0, 0]]
    assert rf.distances.tolist() == [2, 0, 0]
    assert rf.valid_count == 1
    assert rf.neighbor_indices.tolist() == [1, 0, 0]
    assert max_distance(rf) == 2


def test_field_without_padding():
    pts = np.random.default_rng(2).random((6, 3))
    c = PointCloud(pts)
    rf = receptive_field(c, build_index(c), 3, 5, 5)
    assert rf.valid_count == 5 and 3 not in rf.neighbor_indices.tolist()


def test_max_distance_examples():
    from ascn.spatial import ReceptiveField
    rf = ReceptiveField(0, np.array([1, 2, 3]), np.zeros((3, 3)), np.array([1.0, 2.0, 5.0]), 3)
    assert max_distance(rf) == 5


def test_fields_random_cloud_invariants():
    rng = np.random.default_rng(3)
    pts = rng.random((200, 3))
    c = PointCloud(pts)
    idx = build_index(c)
    m = rng.integers(1, 11, size=200)
    fields = receptive_fields(c, idx, m, 10)
    for n, rf in enumerate(fields):
        v = rf.valid_count
        assert v == m[n]
        assert np.all(np.diff(rf.distances[:v]) >= 0)
        assert np.allclose(rf.distances, np.linalg.norm(rf.directions, axis=1), atol=1e-12, rtol=0)
        assert n not in rf.neighbor_indices[:v].tolist()
        assert np.all(rf.neighbor_indices[v:] == n)
        assert np.all(rf.directions[v:] == 0) and np.all(rf.distances[v:] == 0)
        brute = max(np.linalg.norm(pts[j] - pts[n]) for j in rf.neighbor_indices[:v])
        assert max_distance(rf) == pytest.approx(brute, abs=1e-15)
        single = receptive_field(c, idx, n, int(m[n]), 10)
        assert np.array_equal(single.neighbor_indices, rf.neighbor_indices)
        assert np.array_equal(single.directions, rf.directions)


def test_field_errors():
    c = PointCloud([[0, 0, 0]])
    with pytest.raises(DegenerateCloud):
        receptive_field(c, build_index(c), 0, 1, 3)
    c2 = PointCloud([[0, 0, 0], [1, 0, 0]])
    with pytest.raises(InvalidParam):
        receptive_field(c2, build_index(c2), 0, 4, 3)


def test_index_is_independent_of_later_edits():
    pts = np.random.default_rng(4).random((30, 3))
    c = PointCloud(pts)
    idx = SpatialIndex(c)
    pts[:] = 0.0
    assert not np.all(idx.points == 0.0)
