"""Seeded k-means (Lloyd iterations with k-means++ seeding)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ClusteringError(ValueError):
    pass


@dataclass
class ClusteringResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    # inertia after every assignment step of the winning restart
    history: list[float] = field(default_factory=list)


def _as_points(points) -> np.ndarray:
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ClusteringError(f"points must be an N x d matrix with N, d >= 1, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ClusteringError("points contain non-finite coordinates")
    return X


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # Explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion: the
    # expansion loses the exact zero for coincident points.
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeanspp_init(points, K: int, rng_seed) -> np.ndarray:
    """k-means++ seeding: first centroid uniform, then D^2-weighted draws."""
    X = _as_points(points)
    N = X.shape[0]
    if not 1 <= K <= N:
        raise ClusteringError(f"need 1 <= K <= N, got K={K}, N={N}")
    rng = np.random.default_rng(rng_seed)
    chosen = [int(rng.integers(N))]
    d2 = _sq_dists(X, X[chosen[-1]][None, :])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(N, p=d2 / total))
        else:
            # All remaining points coincide with chosen centroids.
            rest = np.setdiff1d(np.arange(N), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None, :])[:, 0])
        d2[chosen] = 0.0
    return X[chosen].copy()


def assign_points(points, centroids) -> np.ndarray:
    """Index of the nearest centroid per point; ties go to the lowest index."""
    X = _as_points(points)
    C = np.asarray(centroids, dtype=np.float64)
    if C.ndim == 1:
        C = C[:, None]
    if C.ndim != 2 or C.shape[1] != X.shape[1]:
        raise ClusteringError(f"centroid dimension {C.shape} does not match points dimension {X.shape[1]}")
    return np.argmin(_sq_dists(X, C), axis=1)


def inertia(points, centroids, labels) -> float:
    X = _as_points(points)
    C = np.asarray(centroids, dtype=np.float64)
    if C.ndim == 1:
        C = C[:, None]
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],) or C.ndim != 2 or C.shape[1] != X.shape[1]:
        raise ClusteringError("inconsistent shapes for inertia")
    if labels.size and (labels.min() < 0 or labels.max() >= C.shape[0]):
        raise ClusteringError("label out of range for the given centroids")
    diff = X - C[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def _update_centroids(X: np.ndarray, labels: np.ndarray, C: np.ndarray) -> np.ndarray:
    K, d = C.shape
    sums = np.zeros((K, d))
    np.add.at(sums, labels, X)
    counts = np.bincount(labels, minlength=K)
    new = C.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if empty.size:
        # Reseed each empty cluster to the point farthest from its own centroid.
        diff = X - new[labels]
        d2 = np.einsum("nd,nd->n", diff, diff)
        order = np.argsort(-d2, kind="stable")
        for k, idx in zip(empty, order):
            new[k] = X[idx]
    return new


def _lloyd(X: np.ndarray, C: np.ndarray, max_iters: int, rel_tol: float):
    labels = assign_points(X, C)
    current = inertia(X, C, labels)
    history = [current]
    it = 0
    while it < max_iters:
        it += 1
        C = _update_centroids(X, labels, C)
        labels = assign_points(X, C)
        new = inertia(X, C, labels)
        history.append(new)
        drop = current - new
        done = drop <= rel_tol * current if current > 0 else True
        current = new
        if done:
            break
    return labels, C, current, it, history


def kmeans(points, K: int, rng_seed: int = 0, max_iters: int = 300,
           rel_tol: float = 1e-6, n_restarts: int = 10) -> ClusteringResult:
    """Best-of-``n_restarts`` Lloyd's algorithm.

    Restart seeds are spawned from ``rng_seed``; the lowest-inertia run wins,
    ties going to the earliest restart.
    """
    X = _as_points(points)
    N = X.shape[0]
    if not 1 <= K <= N:
        raise ClusteringError(f"need 1 <= K <= N, got K={K}, N={N}")
    if max_iters < 1 or rel_tol < 0 or n_restarts < 1:
        raise ClusteringError("max_iters >= 1, rel_tol >= 0 and n_restarts >= 1 are required")
    best = None
    for child in np.random.SeedSequence(rng_seed).spawn(n_restarts):
        C0 = kmeanspp_init(X, K, child)
        labels, C, inert, its, hist = _lloyd(X, C0, max_iters, rel_tol)
        if best is None or inert < best.inertia:
            best = ClusteringResult(labels=labels, centroids=C, inertia=inert,
                                    iterations_run=its, history=hist)
    return best
