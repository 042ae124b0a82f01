import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dmikit.assignment import build_profit_matrix, solve_max_matching
from dmikit.clustering import (
    ClusteringError,
    _lloyd,
    assign_points,
    inertia,
    kmeans,
    kmeanspp_init,
)


def test_kmeanspp_selects_every_point_when_k_equals_n():
    X = np.arange(12.0).reshape(6, 2)
    C = kmeanspp_init(X, 6, rng_seed=3)
    assert sorted(map(tuple, C)) == sorted(map(tuple, X))


def test_kmeanspp_single_centroid_is_a_data_point():
    X = np.random.default_rng(0).normal(size=(20, 3))
    C = kmeanspp_init(X, 1, rng_seed=5)
    assert any(np.array_equal(C[0], x) for x in X)


def test_kmeanspp_deterministic():
    X = np.random.default_rng(1).normal(size=(50, 4))
    assert np.array_equal(kmeanspp_init(X, 5, 9), kmeanspp_init(X, 5, 9))


def test_kmeanspp_rejects_too_many_clusters():
    with pytest.raises(ClusteringError):
        kmeanspp_init(np.zeros((3, 2)), 4, 0)


def test_assign_points_examples():
    C = np.array([[0.0, 0.0], [5.0, 5.0], [-3.0, 2.0]])
    assert assign_points(C, C).tolist() == [0, 1, 2]
    assert assign_points([[0.0], [10.0]], [[1.0], [9.0]]).tolist() == [0, 1]
    assert assign_points([[1.0]], [[0.0], [2.0]]).tolist() == [0]


def test_assign_points_dimension_mismatch():
    with pytest.raises(ClusteringError):
        assign_points(np.zeros((3, 2)), np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (15, 3), elements=st.floats(-10, 10)),
       st.randoms(use_true_random=False))
def test_assign_points_permutation_invariant(X, rnd):
    C = X[:4]
    perm = list(range(len(X)))
    rnd.shuffle(perm)
    assert np.array_equal(assign_points(X[perm], C), assign_points(X, C)[perm])


def test_inertia_examples():
    C = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert inertia(C, C, [0, 1]) == 0.0
    assert inertia([[3.0, 0.0]], [[0.0, 0.0]], [0]) == 9.0
    assert inertia([[0.0], [2.0]], [[1.0]], [0, 0]) == 2.0


def test_inertia_shape_mismatch():
    with pytest.raises(ClusteringError):
        inertia(np.zeros((3, 2)), np.zeros((2, 2)), [0, 1])


def test_kmeans_single_cluster_is_mean():
    res = kmeans([[0.0, 0.0], [2.0, 2.0]], 1, rng_seed=0)
    assert res.centroids.tolist() == [[1.0, 1.0]]
    assert res.inertia == 4.0


def test_kmeans_k_equals_n_is_exact():
    X = np.random.default_rng(2).normal(size=(7, 3))
    res = kmeans(X, 7, rng_seed=1)
    assert res.inertia == 0.0
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, X))


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(0, 0.3, (40, 2)), rng.normal(20, 0.3, (60, 2))])
    y = np.repeat([0, 1], [40, 60])
    res = kmeans(X, 2, rng_seed=7)
    a = solve_max_matching(build_profit_matrix(res.labels, y, 2))
    assert a.total_profit / len(y) == 1.0


def test_kmeans_rejects_bad_input():
    with pytest.raises(ClusteringError):
        kmeans(np.zeros((2, 2)), 3)
    with pytest.raises(ClusteringError):
        kmeans([[0.0, np.inf], [1.0, 1.0]], 1)


def test_kmeans_deterministic_and_self_consistent():
    X = np.random.default_rng(8).normal(size=(200, 5))
    a = kmeans(X, 6, rng_seed=21)
    b = kmeans(X, 6, rng_seed=21)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.centroids, b.centroids)
    assert a.inertia == b.inertia
    assert np.array_equal(a.labels, assign_points(X, a.centroids))
    assert a.inertia == inertia(X, a.centroids, a.labels)


def test_empty_cluster_is_reseeded():
    # Centroid 2 starts far away from every point and captures nothing.
    X = np.array([[0.0], [0.1], [10.0], [10.2], [10.4]])
    C0 = np.array([[0.0], [10.0], [100.0]])
    labels, C, _, _, hist = _lloyd(X, C0, max_iters=20, rel_tol=0.0)
    assert len(set(labels.tolist())) == 3
    assert all(b <= a for a, b in zip(hist, hist[1:]))


@pytest.mark.parametrize("seed", range(20))
def test_lloyd_inertia_non_increasing(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(int(rng.integers(10, 120)), int(rng.integers(1, 6))))
    K = int(rng.integers(1, min(10, len(X)) + 1))
    res = kmeans(X, K, rng_seed=seed, n_restarts=3, rel_tol=0.0)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
