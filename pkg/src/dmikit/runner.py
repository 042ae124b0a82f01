"""Experiment runner, external-embedding evaluation and report tables.

Output layout of ``run_experiment`` (one directory per replicate seed)::

    <out>/config.json
    <out>/seed_<n>/record.json
    <out>/seed_<n>/classifier_matrix.csv
    <out>/seed_<n>/clustering_matrix.csv
    <out>/seed_<n>/baseline.csv
    <out>/seed_<n>/scenario.json
    <out>/seed_<n>/embeddings/task_<i>.jsonl   (only with dump_embeddings)
    <out>/seed_<n>/embeddings/manifest.json    (only with dump_embeddings)
    <out>/seed_<n>/scenario/{scenario.json,train.csv,test.csv}  (only with export_samples)

A seed directory is written under a temporary name and renamed once complete,
so a failed seed never leaves a half-written record behind.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import shutil
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .learner import (
    KdConfig,
    LearnerModel,
    OptimizerConfig,
    ReferenceEncoder,
    RehearsalMemory,
    evaluate_classifier,
    extract_embeddings,
    snapshot_teacher,
    train_task,
    update_memory,
    zero_shot_baseline,
)
from .metrics import (
    ClusteringConfig,
    LabeledEmbeddingSet,
    MetricError,
    TrainEvalMatrix,
    dmi,
    evaluate_dmi_row,
    summarize,
)
from .scenario import ORDERINGS, ScenarioConfig, export_scenario, generate_scenario

log = logging.getLogger(__name__)

METRIC_KEYS = ("acc", "bwt", "fwt", "dmi_stab", "dmi_plas", "dmi_gen")


class ConfigError(ValueError):
    pass


@dataclass
class LearnerConfig:
    hidden_dim: int = 32
    # A narrow embedding keeps clustering of unseen classes informative; with
    # a wide one every class stays separable and the DMI entries saturate.
    embed_dim: int = 2
    classifier_scale: float = 0.3
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass
class MemoryConfig:
    ratio: float = 0.0
    strategy: str = "random"


@dataclass
class RunConfig:
    name: str = "run"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    ordering: str = "frequency"
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    kd: KdConfig = field(default_factory=KdConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    # Scenario seed = scenario.seed + replicate seed when True, scenario.seed otherwise.
    vary_scenario: bool = True
    oracle: bool = False
    dump_embeddings: bool = False
    export_samples: bool = False
    output_dir: Optional[str] = None

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"unknown ordering {self.ordering!r}")
        if not 0.0 <= self.memory.ratio <= 1.0:
            raise ConfigError("memory ratio must lie in [0, 1]")
        if self.memory.strategy not in ("random", "herding"):
            raise ConfigError(f"unknown memory strategy {self.memory.strategy!r}")
        opt = self.learner.optimizer
        if opt.learning_rate <= 0 or opt.epochs < 0 or opt.batch_size < 1 or opt.memory_batch_size < 1:
            raise ConfigError("invalid optimizer settings")
        if self.learner.hidden_dim < 1 or self.learner.embed_dim < 1:
            raise ConfigError("layer sizes must be positive")
        try:
            self.scenario.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            scenario = ScenarioConfig(**raw.pop("scenario", {}))
            learner_raw = dict(raw.pop("learner", {}))
            opt = OptimizerConfig(**learner_raw.pop("optimizer", {}))
            learner = LearnerConfig(optimizer=opt, **learner_raw)
            kd = KdConfig(**raw.pop("kd", {}))
            memory = MemoryConfig(**raw.pop("memory", {}))
            clustering = ClusteringConfig(**raw.pop("clustering", {}))
            cfg = cls(scenario=scenario, learner=learner, kd=kd, memory=memory,
                      clustering=clustering, **raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


# -- persistence helpers -------------------------------------------------------

def round6(A) -> np.ndarray:
    """Round through the 6-decimal text form so CSV round trips are exact."""
    return np.vectorize(lambda x: float(f"{x:.6f}"), otypes=[float])(np.asarray(A, dtype=np.float64))


def matrix_to_csv(A: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"task_{j + 1}" for j in range(A.shape[1])])
    for row in np.atleast_2d(A):
        w.writerow([f"{x:.6f}" for x in row])
    return buf.getvalue()


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MetricError(f"{path}: empty matrix file")
    header, body = rows[0], rows[1:]
    try:
        A = np.array([[float(x) for x in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise MetricError(f"{path}: {exc}") from exc
    if A.ndim != 2 or A.shape[1] != len(header):
        raise MetricError(f"{path}: ragged matrix")
    return A


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def write_embedding_dump(path, es: LabeledEmbeddingSet, ids) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, y, e in zip(ids, es.labels, es.embeddings):
            rec = {"id": int(i), "task": int(es.task_of_class[int(y)]), "label": int(y),
                   "embedding": [float(v) for v in e]}
            fh.write(json.dumps(rec) + "\n")


# -- one replicate -------------------------------------------------------------

def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def dmi_seed(seed: int, task: int) -> int:
    return derive_seed(seed, 3, task)


def run_seed(config: RunConfig, seed: int, dump_dir: Optional[Path] = None,
             scenario_dir: Optional[Path] = None) -> dict:
    """Full continual-learning pipeline for one replicate seed; returns the record dict."""
    t0 = time.perf_counter()
    sc = ScenarioConfig(**asdict(config.scenario))
    if config.vary_scenario:
        sc.seed = config.scenario.seed + seed
    scenario = generate_scenario(sc, config.ordering)
    if scenario_dir is not None:
        export_scenario(scenario, scenario_dir)
    K, T = sc.K, sc.T
    lc = config.learner
    model = LearnerModel.init(sc.d_in, lc.hidden_dim, lc.embed_dim, K,
                              rng_seed=derive_seed(seed, 0),
                              classifier_scale=lc.classifier_scale)
    reference = ReferenceEncoder.from_centroids(scenario.class_centroids, lc.embed_dim,
                                                rng_seed=[sc.seed, 4])
    task_map = scenario.task_of_class
    mem_rng = np.random.default_rng(derive_seed(seed, 1))

    if config.oracle:
        baseline = np.ones(T)
    else:
        baseline = zero_shot_baseline(model, scenario)
    classifier = np.zeros((T, T))
    clustering = np.zeros((T, T))
    memory = RehearsalMemory()
    teacher = None
    traces = []
    dumps = []
    for i in range(T):
        data = scenario.task_train(i)
        model, tlog = train_task(model, data, memory, teacher, reference, config.kd,
                                 lc.optimizer, rng_seed=derive_seed(seed, 2, i))
        traces.append({"epoch_loss": tlog.epoch_loss, "epoch_parts": tlog.epoch_parts})
        teacher = snapshot_teacher(model, memory)
        if config.memory.ratio > 0:
            memory = update_memory(memory, data, config.memory.ratio, config.memory.strategy,
                                   teacher, mem_rng)
        if config.oracle:
            es = LabeledEmbeddingSet(np.eye(K)[scenario.test.y], scenario.test.y.copy(),
                                     task_map, K)
            classifier[i] = 1.0
        else:
            es = extract_embeddings(model, scenario.test, task_map, K)
            for j, task in enumerate(scenario.tasks):
                classifier[i, j] = evaluate_classifier(model, scenario.test, task.class_ids)
        clustering[i] = evaluate_dmi_row(es, i, config.clustering, rng_seed=dmi_seed(seed, i))
        if dump_dir is not None:
            path = dump_dir / f"task_{i + 1}.jsonl"
            write_embedding_dump(path, es, scenario.test.ids)
            dumps.append(path.name)

    classifier = round6(classifier)
    clustering = round6(clustering)
    baseline = round6(baseline)
    TrainEvalMatrix(classifier, "classifier")
    TrainEvalMatrix(clustering, "clustering")
    metrics = summarize(classifier, clustering, baseline)
    if dump_dir is not None:
        dump_json({
            "num_classes": K,
            "task_of_class": {str(c): t for c, t in sorted(task_map.items())},
            "checkpoints": dumps,
            "dmi_seeds": [dmi_seed(seed, i) for i in range(T)],
            "clustering": asdict(config.clustering),
            "baseline": baseline.tolist(),
            "classifier_matrix": classifier.tolist(),
        }, dump_dir / "manifest.json")
    return {
        "seed": seed,
        "scenario_seed": sc.seed,
        "partition": scenario.partition,
        "class_counts": scenario.class_counts,
        "classifier_matrix": classifier.tolist(),
        "clustering_matrix": clustering.tolist(),
        "baseline": baseline.tolist(),
        "metrics": metrics,
        "loss_traces": traces,
        "memory_size": len(memory),
        "wall_clock_s": time.perf_counter() - t0,
        "_scenario_manifest": scenario.manifest(),
    }


def run_experiment(config: RunConfig, out_dir=None) -> dict:
    """Run every replicate seed, persisting each under its own directory.

    Returns a summary with the per-seed records and the list of failures.
    """
    config.validate()
    out = Path(out_dir if out_dir is not None else (config.output_dir or "runs"))
    out.mkdir(parents=True, exist_ok=True)
    dump_json(_jsonable(config.to_dict()), out / "config.json")
    records, failures = {}, {}
    for seed in config.seeds:
        final = out / f"seed_{seed}"
        tmp = Path(tempfile.mkdtemp(prefix=f".seed_{seed}_", dir=out))
        try:
            dump_dir = None
            if config.dump_embeddings:
                dump_dir = tmp / "embeddings"
                dump_dir.mkdir()
            rec = run_seed(config, seed, dump_dir,
                           tmp / "scenario" if config.export_samples else None)
            scen = rec.pop("_scenario_manifest")
            rec = {"config": _jsonable(config.to_dict()), "version": __version__, **rec}
            dump_json(_jsonable(rec), tmp / "record.json")
            dump_json(_jsonable(scen), tmp / "scenario.json")
            (tmp / "classifier_matrix.csv").write_text(
                matrix_to_csv(np.asarray(rec["classifier_matrix"])), encoding="utf-8")
            (tmp / "clustering_matrix.csv").write_text(
                matrix_to_csv(np.asarray(rec["clustering_matrix"])), encoding="utf-8")
            (tmp / "baseline.csv").write_text(
                matrix_to_csv(np.asarray(rec["baseline"])[None, :]), encoding="utf-8")
            if final.exists():
                shutil.rmtree(final)
            os.replace(tmp, final)
            records[seed] = rec
        except Exception as exc:  # one seed failing must not stop the others
            log.error("seed %s failed: %s", seed, exc)
            shutil.rmtree(tmp, ignore_errors=True)
            failures[seed] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            final.mkdir(exist_ok=True)
            dump_json({"seed": seed, "error": failures[seed],
                       "traceback": traceback.format_exc()}, final / "error.json")
    return {"out_dir": str(out), "records": records, "failures": failures}


# -- external embeddings -------------------------------------------------------

class DumpError(ValueError):
    pass


def read_embedding_dump(path, task_of_class: dict[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse one JSONL dump into (ids, labels, embeddings), validating every line."""
    ids, labels, rows = [], [], []
    dim = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DumpError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                sid, task, label, emb = rec["id"], rec["task"], rec["label"], rec["embedding"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DumpError(f"{where}: malformed record ({exc})") from exc
            if not isinstance(label, int) or label not in task_of_class:
                raise DumpError(f"{where}: label {label!r} is not in the task map")
            if task != task_of_class[label]:
                raise DumpError(f"{where}: task {task!r} disagrees with the task map "
                                f"(class {label} belongs to task {task_of_class[label]})")
            if not isinstance(emb, list) or not emb:
                raise DumpError(f"{where}: embedding must be a non-empty list")
            if dim is None:
                dim = len(emb)
            elif len(emb) != dim:
                raise DumpError(f"{where}: embedding length {len(emb)} != {dim}")
            try:
                vec = [float(v) for v in emb]
            except (TypeError, ValueError) as exc:
                raise DumpError(f"{where}: non-numeric embedding") from exc
            if not all(np.isfinite(vec)):
                raise DumpError(f"{where}: non-finite embedding")
            ids.append(sid)
            labels.append(label)
            rows.append(vec)
    if not rows:
        raise DumpError(f"{path}: no records")
    return np.array(ids), np.array(labels, dtype=np.int64), np.array(rows, dtype=np.float64)


def eval_external(manifest_path, out_dir=None) -> dict:
    """Score externally produced embedding dumps with the DMI pipeline.

    The manifest is JSON with ``num_classes``, ``task_of_class`` (class id to
    task index), ``checkpoints`` (one dump per task, relative to the manifest)
    and optionally ``dmi_seeds``, ``clustering``, ``baseline`` and
    ``classifier_matrix``. Classical metrics are only reported when a
    classifier matrix is supplied.
    """
    manifest_path = Path(manifest_path)
    try:
        man = json.loads(manifest_path.read_text(encoding="utf-8"))
        K = int(man["num_classes"])
        task_map = {int(c): int(t) for c, t in man["task_of_class"].items()}
        checkpoints = list(man["checkpoints"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DumpError(f"{manifest_path}: invalid manifest ({exc})") from exc
    T = len(checkpoints)
    if T == 0:
        raise DumpError(f"{manifest_path}: no checkpoints listed")
    if sorted(task_map) != list(range(K)):
        raise DumpError(f"{manifest_path}: task map must cover classes 0..{K - 1}")
    if sorted(set(task_map.values())) != list(range(T)):
        raise DumpError(f"{manifest_path}: task map must use task indices 0..{T - 1}")
    seeds = man.get("dmi_seeds") or [dmi_seed(0, i) for i in range(T)]
    if len(seeds) != T:
        raise DumpError(f"{manifest_path}: dmi_seeds must list one seed per checkpoint")
    clustering_cfg = ClusteringConfig(**man.get("clustering", {}))

    clustering = np.zeros((T, T))
    shape = None
    for i, name in enumerate(checkpoints):
        path = manifest_path.parent / name
        ids, labels, emb = read_embedding_dump(path, task_map)
        if shape is None:
            shape = (len(labels), emb.shape[1])
        elif len(labels) != shape[0]:
            raise DumpError(f"{path}: {len(labels)} records, earlier dumps have {shape[0]}")
        es = LabeledEmbeddingSet(emb, labels, task_map, K)
        clustering[i] = evaluate_dmi_row(es, i, clustering_cfg, rng_seed=int(seeds[i]))
    clustering = round6(clustering)
    TrainEvalMatrix(clustering, "clustering")

    classifier = man.get("classifier_matrix")
    scores = dmi(clustering)
    result = {"clustering_matrix": clustering.tolist(),
              "metrics": {"dmi_stab": scores.stability, "dmi_plas": scores.plasticity,
                          "dmi_gen": scores.generalizability}}
    if classifier is not None:
        classifier = np.asarray(classifier, dtype=np.float64)
        baseline = man.get("baseline")
        baseline = np.zeros(T) if baseline is None else np.asarray(baseline, dtype=np.float64)
        if classifier.shape != (T, T) or baseline.shape != (T,):
            raise DumpError(f"{manifest_path}: classifier matrix / baseline do not match T={T}")
        TrainEvalMatrix(classifier, "classifier")
        result["classifier_matrix"] = classifier.tolist()
        result["metrics"] = summarize(classifier, clustering, baseline)
        if man.get("baseline") is None:
            result["metrics"]["fwt"] = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "clustering_matrix.csv").write_text(matrix_to_csv(clustering), encoding="utf-8")
        dump_json(_jsonable(result), out / "metrics.json")
    return result


# -- report --------------------------------------------------------------------

class ReportError(ValueError):
    pass


def _collect_records(path: Path) -> list[dict]:
    if path.is_dir():
        files = sorted(path.glob("seed_*/record.json"))
        if (path / "record.json").exists():
            files.insert(0, path / "record.json")
    else:
        files = [path]
    if not files:
        raise ReportError(f"{path}: no records found")
    out = []
    for f in files:
        try:
            out.append(json.loads(f.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ReportError(f"{f}: cannot read record ({exc})") from exc
    return out


def _cell(values: list) -> tuple[Optional[float], Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, None
    return float(np.median(vals)), min(vals), max(vals)


def report(record_paths, out=None) -> list[dict]:
    """One row per configuration: median and min-max over its seeds.

    Each path is either a single ``record.json`` or an experiment directory
    whose ``seed_*/record.json`` files form one configuration. Values are
    displayed as percentages.
    """
    if not record_paths:
        raise ReportError("at least one record is required")
    rows, T_seen = [], set()
    for p in record_paths:
        p = Path(p)
        recs = _collect_records(p)
        for r in recs:
            T_seen.add(len(r["classifier_matrix"]))
        if len(T_seen) > 1:
            raise ReportError(f"records mix different task counts: {sorted(T_seen)}")
        name = recs[0].get("config", {}).get("name") or p.stem
        row = {"name": name, "seeds": [r["seed"] for r in recs]}
        for k in METRIC_KEYS:
            row[k] = _cell([r["metrics"][k] for r in recs])
        rows.append(row)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "n_seeds"] + [f"{k}_{s}" for k in METRIC_KEYS for s in ("median", "min", "max")])
        for row in rows:
            cells = []
            for k in METRIC_KEYS:
                cells += ["" if v is None else f"{100 * v:.2f}" for v in row[k]]
            w.writerow([row["name"], len(row["seeds"])] + cells)
        out.write_text(buf.getvalue(), encoding="utf-8")
        out.with_suffix(".txt").write_text(format_report(rows), encoding="utf-8")
    return rows


def format_report(rows: list[dict]) -> str:
    def fmt(cell):
        med, lo, hi = cell
        if med is None:
            return "n/a"
        if lo == hi:
            return f"{100 * med:.1f}"
        return f"{100 * med:.1f} [{100 * lo:.1f}, {100 * hi:.1f}]"

    header = ["config", "Acc", "BWT", "FWT", "DMI stab", "DMI plas", "DMI gen"]
    body = [[r["name"]] + [fmt(r[k]) for k in METRIC_KEYS] for r in rows]
    widths = [max(len(line[c]) for line in [header] + body) for c in range(len(header))]
    lines = ["  ".join(s.ljust(w) for s, w in zip(line, widths)).rstrip() for line in [header] + body]
    return "\n".join(lines) + "\n"
