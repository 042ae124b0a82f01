"""Desk-scale class-incremental learner.

Architecture: ``x -> tanh(W1 x + b1) -> W2 h + b2 = e -> W3 e + b3 = logits``.
The embedding ``e`` is what the DMI pipeline clusters. All gradients are
written out by hand; ``tests/test_gradients.py`` checks them against central
differences.

Losses (means over the rows they apply to):

* cross entropy over the active classes, on current and replayed samples;
* feature distillation ``1 - cos(teacher_e, student_e)`` on replayed samples;
* label distillation, the NLL of the teacher's hard pseudo-label restricted
  to the classes the teacher had seen, on replayed samples;
* alignment ``|reference[y] - e|^2`` towards a frozen per-class reference
  embedding, on current and replayed samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .metrics import EvaluationError, LabeledEmbeddingSet
from .scenario import Scenario, Split

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class LearnerError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class LearnerModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    seen_classes: set[int] = field(default_factory=set)

    @classmethod
    def init(cls, d_in: int, d_h: int, d_e: int, K: int, rng_seed=0,
             classifier_scale: float = 1.0) -> "LearnerModel":
        rng = np.random.default_rng(rng_seed)
        return cls(
            W1=rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_h, d_in)),
            b1=np.zeros(d_h),
            W2=rng.normal(0.0, 1.0 / math.sqrt(d_h), size=(d_e, d_h)),
            b2=np.zeros(d_e),
            W3=rng.normal(0.0, classifier_scale / math.sqrt(d_e), size=(K, d_e)),
            b3=np.zeros(K),
        )

    @property
    def K(self) -> int:
        return self.W3.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "LearnerModel":
        return LearnerModel(**{k: v.copy() for k, v in self.params().items()},
                            seen_classes=set(self.seen_classes))

    def forward(self, X: np.ndarray):
        H = np.tanh(X @ self.W1.T + self.b1)
        E = H @ self.W2.T + self.b2
        L = E @ self.W3.T + self.b3
        return H, E, L

    def embed(self, X: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(X, dtype=np.float64))[1]

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(X, dtype=np.float64))[2]

    def predict(self, X: np.ndarray, classes: Optional[Iterable[int]] = None) -> np.ndarray:
        """Argmax class, over all K logits or only over ``classes``; ties to the lowest id."""
        L = self.logits(X)
        if classes is not None:
            L = np.where(_mask(classes, self.K), L, -np.inf)
        return np.argmax(L, axis=1)


@dataclass(frozen=True)
class TeacherSnapshot:
    model: LearnerModel
    pseudo_labels: dict[int, int]

    @property
    def seen_classes(self) -> frozenset[int]:
        return frozenset(self.model.seen_classes)


@dataclass
class RehearsalMemory:
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    X: Optional[np.ndarray] = None
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pseudo: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class ReferenceEncoder:
    table: np.ndarray

    def __post_init__(self):
        T = np.array(self.table, dtype=np.float64)
        T.setflags(write=False)
        object.__setattr__(self, "table", T)

    @classmethod
    def from_centroids(cls, centroids: np.ndarray, d_e: int, rng_seed) -> "ReferenceEncoder":
        """Fixed random projection of class centroids onto the unit sphere.

        The projection plays the part of a frozen pretrained encoder: classes
        that are close in input space get close reference vectors.
        """
        C = np.asarray(centroids, dtype=np.float64)
        rng = np.random.default_rng(rng_seed)
        P = rng.normal(size=(d_e, C.shape[1]))
        R = (C - C.mean(axis=0)) @ P.T
        R /= np.linalg.norm(R, axis=1, keepdims=True)
        return cls(R)

    def lookup(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        if y.size and (y.min() < 0 or y.max() >= self.table.shape[0]):
            raise LearnerError("no reference embedding for some class")
        return self.table[y]


@dataclass(frozen=True)
class KdConfig:
    lambda_feature: float = 0.1
    lambda_label: float = 0.1
    lambda_align: float = 0.1
    feature: bool = False
    label: bool = False
    align: bool = False

    def __post_init__(self):
        if min(self.lambda_feature, self.lambda_label, self.lambda_align) < 0:
            raise LearnerError("KD weights must be non-negative")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    memory_batch_size: int = 16


def _mask(classes, K: int) -> np.ndarray:
    m = np.zeros(K, dtype=bool)
    m[list(classes)] = True
    return m


def _masked_log_softmax(L: np.ndarray, mask: np.ndarray) -> np.ndarray:
    Z = np.where(mask, L, -np.inf)
    zmax = Z.max(axis=-1, keepdims=True)
    shifted = Z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- individual loss terms ---------------------------------------------------
# Each returns (loss, gradient w.r.t. its input).

def ce_loss_batch(L: np.ndarray, y: np.ndarray, active) -> tuple[float, np.ndarray]:
    L = np.atleast_2d(np.asarray(L, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n, K = L.shape
    if n == 0:
        return 0.0, np.zeros_like(L)
    mask = _mask(active, K)
    if not np.all(mask[y]):
        raise LearnerError("target class is not active")
    logp = _masked_log_softmax(L, mask)
    loss = -float(np.mean(logp[np.arange(n), y]))
    P = np.where(mask, np.exp(logp), 0.0)
    P[np.arange(n), y] -= 1.0
    return loss, P / n


def ce_loss(logits, target: int, active_classes) -> float:
    """Negative log-softmax of ``target`` over the active classes only."""
    return ce_loss_batch(np.asarray(logits, dtype=np.float64)[None, :], [target], active_classes)[0]


def feature_kd_loss_grad(student: np.ndarray, teacher: np.ndarray) -> tuple[float, np.ndarray]:
    S = np.atleast_2d(np.asarray(student, dtype=np.float64))
    Tt = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    if S.shape != Tt.shape:
        raise LearnerError("student and teacher embeddings differ in shape")
    m = S.shape[0]
    if m == 0:
        return 0.0, np.zeros_like(S)
    ns = np.linalg.norm(S, axis=1)
    nt = np.linalg.norm(Tt, axis=1)
    if np.any(ns == 0) or np.any(nt == 0):
        raise NumericError("cosine similarity undefined for a zero-norm embedding")
    cos = np.einsum("nd,nd->n", S, Tt) / (ns * nt)
    loss = float(np.mean(1.0 - cos))
    dcos = Tt / (ns * nt)[:, None] - cos[:, None] * S / (ns ** 2)[:, None]
    return loss, -dcos / m


def feature_kd_loss(student_embeddings, teacher_embeddings) -> float:
    """Mean ``1 - cosine similarity`` between paired embeddings."""
    return feature_kd_loss_grad(student_embeddings, teacher_embeddings)[0]


def label_kd_loss_grad(student_logits: np.ndarray, pseudo_labels, teacher_classes) -> tuple[float, np.ndarray]:
    L = np.asarray(student_logits, dtype=np.float64)
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    if pseudo.size == 0:
        return 0.0, np.zeros_like(np.atleast_2d(L))
    return ce_loss_batch(L, pseudo, teacher_classes)


def label_kd_loss(student_logits, pseudo_labels, teacher_classes) -> float:
    """Mean NLL of the teacher's pseudo-labels under the student, teacher classes only."""
    return label_kd_loss_grad(student_logits, pseudo_labels, teacher_classes)[0]


def align_kd_loss_grad(student: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    S = np.atleast_2d(np.asarray(student, dtype=np.float64))
    R = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if S.shape != R.shape:
        raise LearnerError("embeddings and reference targets differ in shape")
    n = S.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(S)
    diff = S - R
    loss = float(np.mean(np.einsum("nd,nd->n", diff, diff)))
    return loss, 2.0 * diff / n


def align_kd_loss(student_embeddings, targets) -> float:
    """Mean squared distance between embeddings and their class reference vectors."""
    return align_kd_loss_grad(student_embeddings, targets)[0]


def total_loss(ce: float, feature_kd: float, label_kd: float, align_kd: float,
               config: KdConfig) -> float:
    parts = (ce, feature_kd, label_kd, align_kd)
    if not all(math.isfinite(p) for p in parts):
        raise NumericError(f"non-finite loss component in {parts}")
    return (ce + config.lambda_feature * feature_kd + config.lambda_label * label_kd
            + config.lambda_align * align_kd)


# -- batch objective and backprop ----------------------------------------------

@dataclass
class Batch:
    """Rows ``[:n_current]`` are current-task samples, the rest replayed memory."""
    X: np.ndarray
    y: np.ndarray
    n_current: int
    pseudo: Optional[np.ndarray] = None
    teacher_emb: Optional[np.ndarray] = None


def batch_objective(model: LearnerModel, batch: Batch, active, kd: KdConfig,
                    teacher_classes=None, reference: Optional[ReferenceEncoder] = None,
                    terms: Optional[set[str]] = None):
    """Weighted loss on one batch, its parts and gradients for every parameter.

    ``terms`` restricts the objective to a subset of {"ce", "feature",
    "label", "align"} (used by the gradient checks).
    """
    H, E, L = model.forward(batch.X)
    mem = slice(batch.n_current, None)
    n_mem = len(batch.y) - batch.n_current
    dE = np.zeros_like(E)
    dL = np.zeros_like(L)
    parts = {"ce": 0.0, "feature": 0.0, "label": 0.0, "align": 0.0}
    use = terms if terms is not None else {"ce", "feature", "label", "align"}

    if "ce" in use:
        parts["ce"], g = ce_loss_batch(L, batch.y, active)
        dL += g
    if "feature" in use and n_mem and batch.teacher_emb is not None and (kd.feature or terms):
        parts["feature"], g = feature_kd_loss_grad(E[mem], batch.teacher_emb)
        w = kd.lambda_feature if terms is None else 1.0
        dE[mem] += w * g
    if "label" in use and n_mem and batch.pseudo is not None and (kd.label or terms):
        parts["label"], g = label_kd_loss_grad(L[mem], batch.pseudo, teacher_classes)
        w = kd.lambda_label if terms is None else 1.0
        dL[mem] += w * g
    if "align" in use and reference is not None and (kd.align or terms):
        parts["align"], g = align_kd_loss_grad(E, reference.lookup(batch.y))
        w = kd.lambda_align if terms is None else 1.0
        dE += w * g

    if terms is None:
        total = total_loss(parts["ce"], parts["feature"] if kd.feature else 0.0,
                           parts["label"] if kd.label else 0.0,
                           parts["align"] if kd.align else 0.0, kd)
    else:
        total = sum(parts[t] for t in terms)
        if not math.isfinite(total):
            raise NumericError("non-finite loss")

    grads = {"W3": dL.T @ E, "b3": dL.sum(axis=0)}
    dE = dE + dL @ model.W3
    grads["W2"] = dE.T @ H
    grads["b2"] = dE.sum(axis=0)
    dZ = (dE @ model.W2) * (1.0 - H ** 2)
    grads["W1"] = dZ.T @ batch.X
    grads["b1"] = dZ.sum(axis=0)
    return total, parts, grads


# -- memory --------------------------------------------------------------------

def herding_select(features, k: int) -> list[int]:
    """Greedy exemplar selection keeping the running mean close to the class mean."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    m = F.shape[0]
    if not 1 <= k <= m:
        raise LearnerError(f"need 1 <= k <= m, got k={k}, m={m}")
    mu = F.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(F.shape[1])
    available = np.ones(m, dtype=bool)
    for step in range(1, k + 1):
        cand = (running[None, :] + F) / step
        d = np.linalg.norm(mu[None, :] - cand, axis=1)
        d[~available] = np.inf
        idx = int(np.argmin(d))
        chosen.append(idx)
        available[idx] = False
        running += F[idx]
    return chosen


def memory_quota(n_samples: int, ratio: float) -> int:
    # Guard against 0.01 * 600 landing a hair above 6.
    return int(math.ceil(ratio * n_samples - 1e-9))


def update_memory(memory: RehearsalMemory, data: Split, ratio: float, strategy: str,
                  teacher: TeacherSnapshot, rng: np.random.Generator) -> RehearsalMemory:
    """Append this task's exemplars; each stores the teacher's pseudo-label."""
    if not 0.0 < ratio <= 1.0:
        raise LearnerError(f"memory ratio must lie in (0, 1], got {ratio}")
    if strategy not in ("random", "herding"):
        raise LearnerError(f"unknown sampling strategy {strategy!r}")
    classes = sorted(set(data.y.tolist()))
    total = memory_quota(len(data), ratio)
    base, extra = divmod(total, len(classes))
    picked = []
    for rank, c in enumerate(classes):
        quota = base + (1 if rank < extra else 0)
        idx = np.flatnonzero(data.y == c)
        quota = min(quota, len(idx))
        if quota == 0:
            continue
        if strategy == "random":
            sel = rng.choice(idx, size=quota, replace=False)
        else:
            emb = teacher.model.embed(data.X[idx])
            sel = idx[herding_select(emb, quota)]
        picked.append(np.asarray(sel, dtype=np.int64))
    if not picked:
        return memory
    sel = np.concatenate(picked)
    X_new = data.X[sel]
    seen = sorted(teacher.seen_classes)
    pseudo_new = teacher.model.predict(X_new, seen) if seen else data.y[sel]
    X = X_new if memory.X is None else np.vstack([memory.X, X_new])
    return RehearsalMemory(ids=np.concatenate([memory.ids, data.ids[sel]]), X=X,
                           y=np.concatenate([memory.y, data.y[sel]]),
                           pseudo=np.concatenate([memory.pseudo, pseudo_new]))


def snapshot_teacher(model: LearnerModel, memory: RehearsalMemory) -> TeacherSnapshot:
    frozen = model.copy()
    for p in frozen.params().values():
        p.setflags(write=False)
    pseudo: dict[int, int] = {}
    if len(memory) and frozen.seen_classes:
        pred = frozen.predict(memory.X, sorted(frozen.seen_classes))
        pseudo = {int(i): int(p) for i, p in zip(memory.ids, pred)}
    return TeacherSnapshot(model=frozen, pseudo_labels=pseudo)


# -- training and evaluation ---------------------------------------------------

@dataclass
class TrainingLog:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_parts: list[dict] = field(default_factory=list)


def train_task(model: LearnerModel, data: Split, memory: Optional[RehearsalMemory],
               teacher: Optional[TeacherSnapshot], reference: Optional[ReferenceEncoder],
               kd: KdConfig, opt: OptimizerConfig, rng_seed) -> tuple[LearnerModel, TrainingLog]:
    """Mini-batch SGD on one task; returns a new model and the per-epoch loss trace."""
    if len(data) == 0:
        raise LearnerError("task data is empty")
    task_classes = set(int(c) for c in np.unique(data.y))
    overlap = task_classes & model.seen_classes
    if overlap:
        raise LearnerError(f"classes {sorted(overlap)} were already learned in an earlier task")
    rng = np.random.default_rng(rng_seed)
    student = model.copy()
    active = sorted(model.seen_classes | task_classes)
    log = TrainingLog()
    has_mem = memory is not None and len(memory) > 0
    teacher_classes = sorted(teacher.seen_classes) if teacher is not None else []
    kd_mem = has_mem and teacher is not None and bool(teacher_classes)
    teacher_emb_all = teacher.model.embed(memory.X) if kd_mem else None
    n = len(data)
    lr = opt.learning_rate
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        totals, weights = 0.0, 0
        parts_acc = {"ce": 0.0, "feature": 0.0, "label": 0.0, "align": 0.0}
        for start in range(0, n, opt.batch_size):
            cur = order[start:start + opt.batch_size]
            X, y = data.X[cur], data.y[cur]
            pseudo = t_emb = None
            if has_mem:
                take = min(opt.memory_batch_size, len(memory))
                mi = rng.choice(len(memory), size=take, replace=False)
                X = np.vstack([X, memory.X[mi]])
                y = np.concatenate([y, memory.y[mi]])
                if kd_mem:
                    pseudo = memory.pseudo[mi]
                    t_emb = teacher_emb_all[mi]
            batch = Batch(X=X, y=y, n_current=len(cur), pseudo=pseudo, teacher_emb=t_emb)
            loss, parts, grads = batch_objective(student, batch, active, kd,
                                                 teacher_classes=teacher_classes,
                                                 reference=reference)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            for name in PARAM_NAMES:
                getattr(student, name)[...] -= lr * grads[name]
            totals += loss * len(cur)
            weights += len(cur)
            for k in parts_acc:
                parts_acc[k] += parts[k] * len(cur)
        log.epoch_loss.append(totals / weights)
        log.epoch_parts.append({k: v / weights for k, v in parts_acc.items()})
    for name, p in student.params().items():
        if not np.all(np.isfinite(p)):
            raise NumericError(f"parameter {name} became non-finite")
    student.seen_classes |= task_classes
    return student, log


def evaluate_classifier(model: LearnerModel, data: Split, task_classes) -> float:
    """Accuracy on the task's samples with an unmasked argmax over all K logits."""
    sub = data.for_classes(task_classes)
    if len(sub) == 0:
        raise EvaluationError(f"no samples for classes {sorted(task_classes)}")
    return float(np.mean(model.predict(sub.X) == sub.y))


def zero_shot_baseline(model: LearnerModel, scenario: Scenario) -> np.ndarray:
    return np.array([evaluate_classifier(model, scenario.test, t.class_ids)
                     for t in scenario.tasks])


def extract_embeddings(model: LearnerModel, data: Split, task_of_class: dict[int, int],
                       K: int) -> LabeledEmbeddingSet:
    if len(data) == 0:
        raise LearnerError("dataset is empty")
    return LabeledEmbeddingSet(embeddings=model.embed(data.X), labels=data.y.copy(),
                               task_of_class=dict(task_of_class), K=K)
