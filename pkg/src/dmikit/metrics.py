"""Train-evaluation matrices and the metrics computed from them.

Entry ``A[i, j]`` (0-based here) is the performance on task ``j`` after
training through task ``i``. Task indices in the public functions (``t``) are
1-based, matching how the metrics are usually quoted: ``cur_acc(A, 2)`` is
the average of the first two diagonal entries.

Metrics that are undefined for the given horizon (BWT/FWT for t < 2, DMI
stability/generalizability for a single task) are returned as ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .assignment import build_profit_matrix, solve_max_matching
from .clustering import kmeans


class MetricError(ValueError):
    pass


class EvaluationError(MetricError):
    """A task has no samples to evaluate on."""


@dataclass(frozen=True)
class TrainEvalMatrix:
    entries: np.ndarray
    kind: str = "classifier"

    def __post_init__(self):
        A = np.array(self.entries, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise MetricError(f"train-evaluation matrix must be square with T >= 1, got {A.shape}")
        if not np.all(np.isfinite(A)) or A.min() < 0.0 or A.max() > 1.0:
            raise MetricError("matrix entries must be finite and within [0, 1]")
        if self.kind not in ("classifier", "clustering"):
            raise MetricError(f"unknown matrix kind {self.kind!r}")
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)

    @property
    def num_tasks(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class DmiScores:
    stability: Optional[float]
    plasticity: float
    generalizability: Optional[float]

    def as_tuple(self):
        return (self.stability, self.plasticity, self.generalizability)


@dataclass
class LabeledEmbeddingSet:
    embeddings: np.ndarray
    labels: np.ndarray
    task_of_class: dict[int, int]
    K: int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.labels.shape[0]:
            raise MetricError("embeddings must be N x d with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise MetricError(f"labels must lie in [0, {self.K})")
        missing = set(range(self.K)) - set(self.task_of_class)
        if missing:
            raise MetricError(f"classes without a task: {sorted(missing)}")

    @property
    def num_tasks(self) -> int:
        return max(self.task_of_class.values()) + 1

    def task_classes(self, task: int) -> set[int]:
        return {c for c, t in self.task_of_class.items() if t == task}


def _as_matrix(matrix) -> np.ndarray:
    if isinstance(matrix, TrainEvalMatrix):
        return matrix.entries
    return TrainEvalMatrix(matrix).entries


def _check_horizon(t: int, T: int, lowest: int) -> None:
    if not lowest <= t <= T:
        raise MetricError(f"t must lie in [{lowest}, {T}], got {t}")


def cur_acc(matrix, t: int) -> float:
    """Mean of the first ``t`` diagonal entries."""
    A = _as_matrix(matrix)
    _check_horizon(t, A.shape[0], 1)
    return float(np.mean(np.diag(A)[:t]))


def last_acc(matrix) -> float:
    """Mean of the final row."""
    A = _as_matrix(matrix)
    return float(np.mean(A[-1]))


def bwt(matrix, t: int | None = None) -> Optional[float]:
    """Average drop of every earlier task relative to when it was learned."""
    A = _as_matrix(matrix)
    T = A.shape[0]
    t = T if t is None else t
    if t < 2:
        _check_horizon(t, T, 1)
        return None
    _check_horizon(t, T, 2)
    total = 0.0
    for i in range(1, t):
        for j in range(i):
            total += A[i, j] - A[j, j]
    return float(2.0 * total / (t * (t - 1)))


def fwt(matrix, baseline, t: int | None = None) -> Optional[float]:
    """Gain on each next task before training on it, over the zero-shot baseline."""
    A = _as_matrix(matrix)
    T = A.shape[0]
    base = np.asarray(baseline, dtype=np.float64)
    if base.shape != (T,):
        raise MetricError(f"baseline must have length {T}, got shape {base.shape}")
    t = T if t is None else t
    if t < 2:
        _check_horizon(t, T, 1)
        return None
    _check_horizon(t, T, 2)
    total = 0.0
    for i in range(1, t):
        total += A[i - 1, i] - base[i]
    return float(total / (t - 1))


def dmi(matrix) -> DmiScores:
    """Region means: strict lower triangle, diagonal, strict upper triangle."""
    A = _as_matrix(matrix)
    T = A.shape[0]
    plas = float(np.mean(np.diag(A)))
    if T == 1:
        return DmiScores(None, plas, None)
    lower = A[np.tril_indices(T, k=-1)]
    upper = A[np.triu_indices(T, k=1)]
    return DmiScores(float(lower.mean()), plas, float(upper.mean()))


def class_agnostic_accuracy(matched_labels, ground_truth, task_classes) -> float:
    """Share of a task's samples whose matched cluster label equals the true class."""
    matched = np.asarray(matched_labels)
    gt = np.asarray(ground_truth)
    if matched.shape != gt.shape:
        raise MetricError("matched and ground-truth labels differ in length")
    classes = list(task_classes)
    if not classes:
        raise MetricError("task_classes must be non-empty")
    in_task = np.isin(gt, classes)
    n = int(in_task.sum())
    if n == 0:
        raise EvaluationError(f"no samples for task classes {sorted(classes)}")
    return int(np.count_nonzero(matched[in_task] == gt[in_task])) / n


@dataclass(frozen=True)
class ClusteringConfig:
    max_iters: int = 300
    rel_tol: float = 1e-6
    n_restarts: int = 10


def match_clusters(cluster_labels, ground_truth, K: int) -> np.ndarray:
    """Relabel cluster ids to class ids via the optimal one-to-one matching."""
    profit = build_profit_matrix(np.asarray(cluster_labels, dtype=np.int64),
                                 np.asarray(ground_truth, dtype=np.int64), K)
    return solve_max_matching(profit).apply(cluster_labels)


def evaluate_dmi_row(embeddings: LabeledEmbeddingSet, task_index: int | None = None,
                     clustering_config: ClusteringConfig | None = None,
                     rng_seed: int = 0) -> np.ndarray:
    """Class-agnostic accuracy of every task for one checkpoint's embeddings.

    ``task_index`` names the checkpoint the row belongs to; the row itself
    does not depend on it.
    """
    cfg = clustering_config or ClusteringConfig()
    es = embeddings
    present = set(np.unique(es.labels).tolist())
    if present != set(range(es.K)):
        raise EvaluationError(f"embeddings do not cover all {es.K} classes")
    result = kmeans(es.embeddings, es.K, rng_seed=rng_seed, max_iters=cfg.max_iters,
                    rel_tol=cfg.rel_tol, n_restarts=cfg.n_restarts)
    matched = match_clusters(result.labels, es.labels, es.K)
    return np.array([class_agnostic_accuracy(matched, es.labels, es.task_classes(j))
                     for j in range(es.num_tasks)])


def summarize(classifier, clustering, baseline) -> dict:
    """Headline numbers of a run: Acc (last-ACC), BWT_T, FWT_T and the DMI triple."""
    A = _as_matrix(classifier)
    scores = dmi(TrainEvalMatrix(_as_matrix(clustering), kind="clustering"))
    return {
        "acc": last_acc(A),
        "bwt": bwt(A),
        "fwt": fwt(A, baseline),
        "cur_acc": cur_acc(A, A.shape[0]),
        "dmi_stab": scores.stability,
        "dmi_plas": scores.plasticity,
        "dmi_gen": scores.generalizability,
    }


def task_map_from(partition: list) -> dict[int, int]:
    return {int(c): t for t, classes in enumerate(partition) for c in classes}


def remap_keys(mapping: Mapping) -> dict[int, int]:
    return {int(k): int(v) for k, v in mapping.items()}
