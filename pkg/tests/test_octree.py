import numpy as np
import pytest

from soi.octree import Octree, knn_brute, knn_bulk


def brute_radius(points, query, r):
    d = np.sqrt(((points - query) ** 2).sum(axis=1))
    return np.nonzero(d <= r)[0]


def test_knn_matches_brute_force_randomized():
    rng = np.random.default_rng(7)
    for trial in range(60):
        n = int(rng.integers(1, 400))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.01, 10)
        tree = Octree(pts, leaf_capacity=int(rng.integers(1, 32)))
        for _ in range(5):
            q = rng.normal(size=3) * 3
            k = int(rng.integers(1, min(n, 12) + 1))
            got = tree.knn(q, k)
            want = knn_brute(pts, q, k)
            assert np.array_equal(got, want)


def test_knn_distance_ties_break_to_lower_index():
    # eight copies of the same point: nearest neighbors must be 0,1,2,...
    pts = np.tile(np.array([[0.5, 0.5, 0.5]]), (8, 1))
    pts = np.vstack([pts, [[2.0, 0.0, 0.0]]])
    tree = Octree(pts)
    assert np.array_equal(tree.knn(np.zeros(3), 4), [0, 1, 2, 3])
    # symmetric pair equidistant from the query
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 3.0, 0]])
    assert np.array_equal(Octree(pts).knn(np.zeros(3), 2), [0, 1])


def test_radius_neighbors_matches_brute_inclusive():
    rng = np.random.default_rng(11)
    for _ in range(40):
        n = int(rng.integers(1, 300))
        pts = rng.uniform(-1, 1, size=(n, 3))
        tree = Octree(pts)
        q = rng.uniform(-1.2, 1.2, size=3)
        r = float(rng.uniform(0.05, 1.5))
        assert np.array_equal(tree.radius_neighbors(q, r), brute_radius(pts, q, r))


def test_radius_boundary_is_inclusive():
    pts = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    tree = Octree(pts)
    assert np.array_equal(tree.radius_neighbors(np.zeros(3), 1.0), [0])


def test_knn_k_larger_than_n_raises():
    tree = Octree(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        tree.knn(np.zeros(3), 4)


def test_coincident_cloud():
    pts = np.zeros((50, 3))
    tree = Octree(pts)
    assert np.array_equal(tree.knn(np.ones(3), 5), [0, 1, 2, 3, 4])
    assert len(tree.radius_neighbors(np.zeros(3), 0.1)) == 50


def test_knn_bulk_matches_per_point_queries():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(150, 3))
    idx, dist = knn_bulk(pts, 5)
    for i in range(len(pts)):
        d = np.sqrt(((pts - pts[i]) ** 2).sum(axis=1))
        d[i] = np.inf
        order = np.lexsort((np.arange(len(pts)), d))[:5]
        assert np.array_equal(idx[i], order)
        assert np.allclose(dist[i], d[order])


def test_knn_bulk_with_duplicates():
    pts = np.vstack([np.zeros((6, 3)), np.ones((2, 3))])
    idx, _ = knn_bulk(pts, 3)
    assert np.array_equal(idx[0], [1, 2, 3])
    assert np.array_equal(idx[5], [0, 1, 2])
    assert np.array_equal(idx[7], [6, 0, 1])
