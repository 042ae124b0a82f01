import json

import numpy as np
import pytest

from dmikit import cli, runner
from dmikit.metrics import summarize
from dmikit.runner import DumpError, ReportError, RunConfig, eval_external, read_matrix_csv, report

SMALL = {"scenario": {"samples_per_class": [30] * 12},
         "learner": {"optimizer": {"epochs": 3}}}


def write_config(path, **overrides):
    cfg = json.loads(json.dumps(SMALL))
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def test_run_writes_records_and_round_trips(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", memory={"ratio": 0.1, "strategy": "herding"},
                       dump_embeddings=True)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "out"),
                     "--seed", "0", "--seed", "3"]) == 0
    assert "seed 3" in capsys.readouterr().out
    seed_dir = tmp_path / "out" / "seed_3"
    rec = json.loads((seed_dir / "record.json").read_text())
    assert rec["seed"] == 3 and rec["version"] == "0.1.0"
    assert len(rec["loss_traces"]) == 6 and len(rec["loss_traces"][0]["epoch_loss"]) == 3

    # Metrics recomputed from the CSVs equal the persisted ones.
    A = read_matrix_csv(seed_dir / "classifier_matrix.csv")
    D = read_matrix_csv(seed_dir / "clustering_matrix.csv")
    base = read_matrix_csv(seed_dir / "baseline.csv")[0]
    again = summarize(A, D, base)
    for k, v in rec["metrics"].items():
        if v is None:
            assert again[k] is None
        else:
            assert again[k] == pytest.approx(v, abs=1e-9)

    # External evaluation of the dumped embeddings reproduces the clustering matrix.
    out = tmp_path / "ext"
    assert cli.main(["eval-embeddings", "--manifest", str(seed_dir / "embeddings" / "manifest.json"),
                     "--out", str(out)]) == 0
    np.testing.assert_allclose(read_matrix_csv(out / "clustering_matrix.csv"), D, atol=1e-9, rtol=0)
    ext = json.loads((out / "metrics.json").read_text())
    assert ext["metrics"]["acc"] == rec["metrics"]["acc"]


def test_run_is_byte_deterministic(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", memory={"ratio": 0.1, "strategy": "random"},
                       kd={"feature": True, "label": True, "align": True})
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "1"]) == 0
    for f in ("classifier_matrix.csv", "clustering_matrix.csv", "baseline.csv"):
        assert (tmp_path / "a/seed_1" / f).read_bytes() == (tmp_path / "b/seed_1" / f).read_bytes()


def test_failing_seed_is_isolated(tmp_path, monkeypatch):
    real = runner.run_seed

    def flaky(config, seed, *args, **kwargs):
        if seed == 1:
            raise FloatingPointError("boom")
        return real(config, seed, *args, **kwargs)

    monkeypatch.setattr(runner, "run_seed", flaky)
    cfg = write_config(tmp_path / "cfg.json", seeds=[0, 1, 2])
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 1
    assert (tmp_path / "out/seed_0/record.json").exists()
    assert (tmp_path / "out/seed_2/record.json").exists()
    err = json.loads((tmp_path / "out/seed_1/error.json").read_text())
    assert "boom" in err["error"]
    assert not (tmp_path / "out/seed_1/record.json").exists()
    assert not list((tmp_path / "out").glob(".seed_*"))


def test_oracle_run_is_perfect(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", oracle=True)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    rec = json.loads((tmp_path / "out/seed_0/record.json").read_text())
    assert np.all(np.array(rec["classifier_matrix"]) == 1.0)
    assert np.all(np.array(rec["clustering_matrix"]) == 1.0)
    m = rec["metrics"]
    assert (m["dmi_stab"], m["dmi_plas"], m["dmi_gen"]) == (1.0, 1.0, 1.0)


@pytest.mark.parametrize("raw", [
    {"seeds": []},
    {"ordering": "alphabetical"},
    {"memory": {"ratio": 2.0}},
    {"memory": {"strategy": "reservoir"}},
    {"learner": {"optimizer": {"learning_rate": 0}}},
    {"scenario": {"K": 2, "T": 3}},
    {"unknown_field": 1},
    {"kd": {"lambda_align": -1}},
])
def test_config_errors_exit_2(tmp_path, raw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_config_round_trip():
    cfg = RunConfig.from_dict({"name": "x", "kd": {"align": True}, "seeds": [4, 5]})
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "0.1.0" in capsys.readouterr().out


# -- external embeddings ---------------------------------------------------------

def write_dumps(tmp_path, T=2, per_class=4, **extra):
    K = 2 * T
    task_of_class = {c: c // 2 for c in range(K)}
    names = []
    for t in range(T):
        lines = []
        for c in range(K):
            for k in range(per_class):
                lines.append(json.dumps({"id": c * per_class + k, "task": task_of_class[c],
                                         "label": c, "embedding": np.eye(K)[c].tolist()}))
        name = f"ckpt_{t}.jsonl"
        (tmp_path / name).write_text("\n".join(lines) + "\n")
        names.append(name)
    man = {"num_classes": K, "task_of_class": {str(c): t for c, t in task_of_class.items()},
           "checkpoints": names, **extra}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(man))
    return path


def test_one_hot_dumps_give_perfect_dmi(tmp_path):
    res = eval_external(write_dumps(tmp_path, T=3))
    assert res["metrics"] == {"dmi_stab": 1.0, "dmi_plas": 1.0, "dmi_gen": 1.0}
    assert "classifier_matrix" not in res


def test_single_checkpoint_reports_plasticity_only(tmp_path):
    res = eval_external(write_dumps(tmp_path, T=1))
    assert res["metrics"] == {"dmi_stab": None, "dmi_plas": 1.0, "dmi_gen": None}


def test_classical_metrics_need_classifier_matrix(tmp_path):
    path = write_dumps(tmp_path, T=2, classifier_matrix=[[0.9, 0.1], [0.6, 0.8]], baseline=[0.0, 0.2])
    m = eval_external(path)["metrics"]
    assert m["acc"] == pytest.approx(0.7)
    assert m["bwt"] == pytest.approx(-0.3)
    assert m["fwt"] == pytest.approx(-0.1)


def test_malformed_line_names_file_and_line(tmp_path):
    path = write_dumps(tmp_path, T=2)
    lines = (tmp_path / "ckpt_1.jsonl").read_text().splitlines()
    rec = json.loads(lines[4])
    rec["embedding"] = rec["embedding"][:-1]
    lines[4] = json.dumps(rec)
    (tmp_path / "ckpt_1.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DumpError, match=r"ckpt_1\.jsonl:5"):
        eval_external(path)
    assert cli.main(["eval-embeddings", "--manifest", str(path), "--out", str(tmp_path / "o")]) == 2


def test_dump_validation_errors(tmp_path):
    path = write_dumps(tmp_path, T=2)
    good = (tmp_path / "ckpt_1.jsonl").read_text()
    (tmp_path / "ckpt_1.jsonl").write_text(good.replace('"label": 3', '"label": 9'))
    with pytest.raises(DumpError, match="not in the task map"):
        eval_external(path)
    (tmp_path / "ckpt_1.jsonl").write_text("\n".join(good.splitlines()[:-1]) + "\n")
    with pytest.raises(DumpError, match="records"):
        eval_external(path)
    (tmp_path / "ckpt_1.jsonl").unlink()
    with pytest.raises(DumpError, match="cannot open"):
        eval_external(path)


# -- report ----------------------------------------------------------------------

def fake_record(path, name, seed, T=2, acc=0.5):
    A = np.full((T, T), acc)
    rec = {"config": {"name": name}, "seed": seed, "classifier_matrix": A.tolist(),
           "metrics": summarize(A, np.full((T, T), 0.25), np.zeros(T))}
    path.write_text(json.dumps(rec))
    return path


def test_report_single_record_matches_its_metrics(tmp_path):
    rec = fake_record(tmp_path / "r.json", "solo", 0, acc=0.42)
    rows = report([rec], tmp_path / "table.csv")
    assert rows[0]["acc"] == (0.42, 0.42, 0.42)
    text = (tmp_path / "table.txt").read_text()
    assert "solo" in text and "42.0" in text
    assert "42.00" in (tmp_path / "table.csv").read_text()


def test_report_median_and_range_over_seeds(tmp_path):
    d = tmp_path / "exp"
    for seed, acc in enumerate([0.2, 0.6, 0.3]):
        (d / f"seed_{seed}").mkdir(parents=True)
        fake_record(d / f"seed_{seed}" / "record.json", "exp", seed, acc=acc)
    row = report([d])[0]
    assert row["acc"] == pytest.approx((0.3, 0.2, 0.6))
    assert row["seeds"] == [0, 1, 2]


def test_report_one_row_per_ordering(tmp_path):
    paths = [fake_record(tmp_path / f"{o}.json", o, 0)
             for o in ("frequency", "close_semantic", "diverse_semantic")]
    assert [r["name"] for r in report(paths)] == ["frequency", "close_semantic", "diverse_semantic"]


def test_report_rejects_mixed_task_counts(tmp_path):
    a = fake_record(tmp_path / "a.json", "a", 0, T=2)
    b = fake_record(tmp_path / "b.json", "b", 0, T=3)
    with pytest.raises(ReportError):
        report([a, b])
    assert cli.main(["report", "--records", str(a), str(b), "--out", str(tmp_path / "t.csv")]) == 2
