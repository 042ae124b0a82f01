"""Synthetic class-incremental scenarios and task-ordering schemes.

Each class is an isotropic Gaussian around a centroid drawn uniformly from a
hypercube (optionally from a hypercube inside a random low-dimensional
subspace, see ``semantic_dim``). Classes are partitioned into ``T`` disjoint tasks by one of three
orderings:

* ``frequency``: most populated classes first.
* ``close_semantic``: geometrically close classes share a task.
* ``diverse_semantic``: every task mixes classes from different regions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .clustering import kmeans

ORDERINGS = ("frequency", "close_semantic", "diverse_semantic")


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    K: int = 12
    T: int = 6
    d_in: int = 16
    samples_per_class: Optional[list[int]] = None
    class_spread: float = 3.0
    noise_sigma: float = 0.6
    test_fraction: float = 0.3
    seed: int = 0
    # Centroids live in a random semantic_dim-dimensional subspace of the
    # input space when set; None draws them from the full hypercube.
    semantic_dim: Optional[int] = None

    def validate(self) -> None:
        if not (isinstance(self.K, int) and isinstance(self.T, int) and self.K >= self.T >= 1):
            raise ScenarioError(f"need integers K >= T >= 1, got K={self.K}, T={self.T}")
        if self.d_in < 1:
            raise ScenarioError("d_in must be positive")
        if self.samples_per_class is not None:
            if len(self.samples_per_class) != self.K:
                raise ScenarioError("samples_per_class must list one count per class")
            if min(self.samples_per_class) < 2:
                raise ScenarioError("every class needs at least 2 samples (one train, one test)")
        if self.class_spread <= 0 or self.noise_sigma < 0:
            raise ScenarioError("class_spread must be > 0 and noise_sigma >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ScenarioError("test_fraction must lie in (0, 1)")
        if self.semantic_dim is not None and not 1 <= self.semantic_dim <= self.d_in:
            raise ScenarioError("semantic_dim must lie in [1, d_in]")

    def class_counts(self) -> list[int]:
        if self.samples_per_class is not None:
            return [int(n) for n in self.samples_per_class]
        # Unequal 100..600 per class, shuffled so that class ids carry no size information.
        counts = np.rint(np.linspace(100, 600, self.K)).astype(int)
        rng = np.random.default_rng([self.seed, 1])
        return [int(n) for n in rng.permutation(counts)]


@dataclass
class TaskSpec:
    index: int
    class_ids: list[int]
    n_train: int
    n_test: int


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask_or_idx) -> "Split":
        return Split(self.X[mask_or_idx], self.y[mask_or_idx], self.ids[mask_or_idx])

    def for_classes(self, classes) -> "Split":
        return self.subset(np.isin(self.y, list(classes)))


@dataclass
class Scenario:
    config: ScenarioConfig
    ordering: str
    tasks: list[TaskSpec]
    class_centroids: np.ndarray
    train: Split
    test: Split
    class_counts: list[int] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def partition(self) -> list[list[int]]:
        return [list(t.class_ids) for t in self.tasks]

    @property
    def task_of_class(self) -> dict[int, int]:
        return {c: t.index for t in self.tasks for c in t.class_ids}

    def task_train(self, t: int) -> Split:
        return self.train.for_classes(self.tasks[t].class_ids)

    def task_test(self, t: int) -> Split:
        return self.test.for_classes(self.tasks[t].class_ids)

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "ordering": self.ordering,
            "class_counts": list(self.class_counts),
            "tasks": [{"index": t.index, "class_ids": list(t.class_ids),
                       "n_train": t.n_train, "n_test": t.n_test} for t in self.tasks],
        }


def _chunk_sizes(K: int, T: int) -> list[int]:
    base, extra = divmod(K, T)
    return [base + (1 if t < extra else 0) for t in range(T)]


def order_frequency(class_counts: Sequence[int], T: int) -> list[list[int]]:
    """Sort classes by descending count (ties to lower id) and cut into T contiguous chunks."""
    K = len(class_counts)
    if not 1 <= T <= K:
        raise ScenarioError(f"need 1 <= T <= K, got T={T}, K={K}")
    order = sorted(range(K), key=lambda c: (-class_counts[c], c))
    tasks, start = [], 0
    for size in _chunk_sizes(K, T):
        tasks.append(order[start:start + size])
        start += size
    return tasks


def _balanced_groups(centroids: np.ndarray, T: int, seed) -> list[list[int]]:
    """k-means groups of class centroids, rebalanced so sizes differ by at most one."""
    C = np.asarray(centroids, dtype=np.float64)
    K = C.shape[0]
    res = kmeans(C, T, rng_seed=seed, n_restarts=10)
    centers = res.centroids
    labels = res.labels.copy()
    caps = sorted(_chunk_sizes(K, T), reverse=True)
    # Largest clusters keep the largest capacities.
    sizes = np.bincount(labels, minlength=T)
    cap = np.empty(T, dtype=int)
    for rank, g in enumerate(sorted(range(T), key=lambda g: (-sizes[g], g))):
        cap[g] = caps[rank]
    while True:
        sizes = np.bincount(labels, minlength=T)
        over = [g for g in range(T) if sizes[g] > cap[g]]
        if not over:
            break
        g = over[0]
        members = np.flatnonzero(labels == g)
        d_own = ((C[members] - centers[g]) ** 2).sum(axis=1)
        far = members[int(np.argmax(d_own))]
        under = [h for h in range(T) if sizes[h] < cap[h]]
        d_other = ((centers[under] - C[far]) ** 2).sum(axis=1)
        labels[far] = under[int(np.argmin(d_other))]
    return [sorted(np.flatnonzero(labels == g).tolist()) for g in range(T)]


def _order_by_count(groups: list[list[int]], class_counts) -> list[list[int]]:
    if class_counts is None:
        class_counts = [1] * (max(max(g) for g in groups) + 1)
    total = [sum(class_counts[c] for c in g) for g in groups]
    order = sorted(range(len(groups)), key=lambda g: (-total[g], min(groups[g])))
    return [groups[g] for g in order]


def order_close_semantic(class_centroids, T: int, seed=0, class_counts=None) -> list[list[int]]:
    """Tasks are balanced k-means groups of class centroids, most populated task first."""
    C = np.asarray(class_centroids, dtype=np.float64)
    if not 1 <= T <= C.shape[0]:
        raise ScenarioError(f"need 1 <= T <= K, got T={T}, K={C.shape[0]}")
    return _order_by_count(_balanced_groups(C, T, seed), class_counts)


def order_diverse_semantic(class_centroids, T: int, seed=0, class_counts=None) -> list[list[int]]:
    """Deal the close-semantic groups round-robin so each task spans many groups."""
    C = np.asarray(class_centroids, dtype=np.float64)
    K = C.shape[0]
    if not 1 <= T <= K:
        raise ScenarioError(f"need 1 <= T <= K, got T={T}, K={K}")
    groups = _balanced_groups(C, T, seed)
    tasks: list[list[int]] = [[] for _ in range(T)]
    slot = 0
    for g in groups:
        for c in g:
            tasks[slot % T].append(c)
            slot += 1
    return _order_by_count([sorted(t) for t in tasks], class_counts)


def draw_centroids(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    K, d, s = config.K, config.d_in, config.semantic_dim
    if s is None:
        return rng.uniform(-config.class_spread, config.class_spread, size=(K, d))
    latent = rng.uniform(-config.class_spread, config.class_spread, size=(K, s))
    basis, _ = np.linalg.qr(rng.normal(size=(d, s)))
    return latent @ basis.T


def generate_scenario(config: ScenarioConfig, ordering: str = "frequency") -> Scenario:
    config.validate()
    if ordering not in ORDERINGS:
        raise ScenarioError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    K, d = config.K, config.d_in
    counts = config.class_counts()
    rng = np.random.default_rng([config.seed, 0])
    centroids = draw_centroids(config, rng)
    train_parts, test_parts = [], []
    next_id = 0
    for c in range(K):
        n = counts[c]
        X = centroids[c] + rng.normal(0.0, 1.0, size=(n, d)) * config.noise_sigma
        ids = np.arange(next_id, next_id + n)
        next_id += n
        n_test = min(n - 1, max(1, int(round(config.test_fraction * n))))
        perm = rng.permutation(n)
        te, tr = perm[:n_test], perm[n_test:]
        y = np.full(n, c, dtype=np.int64)
        train_parts.append((X[tr], y[tr], ids[tr]))
        test_parts.append((X[te], y[te], ids[te]))

    def stack(parts):
        return Split(np.concatenate([p[0] for p in parts]),
                     np.concatenate([p[1] for p in parts]),
                     np.concatenate([p[2] for p in parts]))

    train, test = stack(train_parts), stack(test_parts)
    order_seed = [config.seed, 2]
    if ordering == "frequency":
        partition = order_frequency(counts, config.T)
    elif ordering == "close_semantic":
        partition = order_close_semantic(centroids, config.T, order_seed, counts)
    else:
        partition = order_diverse_semantic(centroids, config.T, order_seed, counts)
    tasks = []
    for t, classes in enumerate(partition):
        tasks.append(TaskSpec(index=t, class_ids=list(classes),
                              n_train=int(np.isin(train.y, classes).sum()),
                              n_test=int(np.isin(test.y, classes).sum())))
    return Scenario(config=config, ordering=ordering, tasks=tasks, class_centroids=centroids,
                    train=train, test=test, class_counts=counts)


def mean_within_task_distance(class_centroids, partition) -> float:
    """Average pairwise centroid distance inside tasks (pairs pooled over tasks)."""
    C = np.asarray(class_centroids, dtype=np.float64)
    dists = []
    for classes in partition:
        for a in range(len(classes)):
            for b in range(a + 1, len(classes)):
                dists.append(float(np.linalg.norm(C[classes[a]] - C[classes[b]])))
    return float(np.mean(dists)) if dists else 0.0


def export_scenario(scenario: Scenario, out_dir) -> None:
    """Write ``scenario.json`` plus ``train.csv`` / ``test.csv`` (id, label, x_1..x_d)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(
        json.dumps(scenario.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    d = scenario.config.d_in
    for name, split in (("train", scenario.train), ("test", scenario.test)):
        with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label"] + [f"x_{k + 1}" for k in range(d)])
            for i, y, x in zip(split.ids, split.y, split.X):
                w.writerow([int(i), int(y)] + [repr(float(v)) for v in x])
