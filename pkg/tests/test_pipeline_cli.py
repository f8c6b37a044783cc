import json
from pathlib import Path

import numpy as np
import pytest

from procsight import pipeline as pipeline_mod
from procsight.cli import main
from procsight.errors import NumericError, ValidationError
from procsight.evaluation import read_curve_csv
from procsight.features import EVENT_ONLY, FeatureSequence, read_matrix, write_matrix
from procsight.ingest import read_activities
from procsight.persistence import load_model
from procsight.pipeline import PipelineConfig, run_pipeline, stamp_line

SMALL = {
    "seed": 5,
    "campaign": {"n_malicious": 16, "n_benign": 16},
    "train": {"epochs": 3, "hidden_width": 8},
    "horizon": 10,
    "repetitions": 1,
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("PROCSIGHT_SEED", raising=False)


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# --------------------------------------------------------------------------- pipeline


def test_pipeline_reruns_are_byte_identical(tmp_path, small_config):
    assert main(["pipeline", "--config", str(small_config), "--out", str(tmp_path / "a")]) == 0
    assert main(["pipeline", "--config", str(small_config), "--out", str(tmp_path / "b")]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys()
    differing = [k for k in a if a[k] != b[k]]
    # config.json records out_dir; nothing else may differ
    assert differing == ["config.json"]


def test_every_artifact_carries_the_stamp(tmp_path):
    cfg = PipelineConfig.from_dict({**SMALL, "out_dir": str(tmp_path / "o")})
    result = run_pipeline(cfg)
    stamp = result.stamp
    assert stamp == {"config_hash": cfg.config_hash(), "seed": 5, "format_version": 1}
    line = stamp_line(stamp)
    assert (tmp_path / "o" / "report.csv").read_text().splitlines()[0] == f"# {line}"
    for key, path in result.artifacts.items():
        if key.startswith("curve:"):
            assert path.read_text().splitlines()[0] == f"# {line}"
        elif key.startswith("matrix:"):
            assert read_matrix(path)[0]["stamp"] == stamp
        elif key.startswith("model:"):
            assert json.loads(path.read_text())["stamp"] == stamp
            load_model(path)
    assert json.loads((tmp_path / "o" / "sim" / "stamp.json").read_text()) == stamp
    with open(result.artifacts["activities"]) as fh:
        assert json.loads(fh.readline())["stamp"] == stamp
    assert len(read_curve_csv(result.artifacts["curve:machine_10"])) == 10


def test_config_hash_ignores_output_location():
    a = PipelineConfig.from_dict({**SMALL, "out_dir": "x"})
    b = PipelineConfig.from_dict({**SMALL, "out_dir": "y", "resume": True})
    c = PipelineConfig.from_dict({**SMALL, "seed": 6})
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_resume_skips_stamped_stages(tmp_path):
    cfg = PipelineConfig.from_dict({**SMALL, "out_dir": str(tmp_path / "o")})
    first = run_pipeline(cfg)
    report = first.artifacts["report"].read_bytes()
    again = run_pipeline(PipelineConfig.from_dict({**SMALL, "out_dir": str(tmp_path / "o"), "resume": True}))
    assert again.skipped == list(pipeline_mod.STAGES)
    assert again.artifacts["report"].read_bytes() == report

    # a lost artifact reruns its stage and every later one
    first.artifacts["curve:complete_31"].unlink()
    partial = run_pipeline(PipelineConfig.from_dict({**SMALL, "out_dir": str(tmp_path / "o"), "resume": True}))
    assert partial.skipped == ["simulate", "ingest", "featurize"]
    assert partial.artifacts["report"].read_bytes() == report

    # a different config invalidates the stamp
    changed = PipelineConfig.from_dict({**SMALL, "seed": 9, "out_dir": str(tmp_path / "o"), "resume": True})
    assert run_pipeline(changed).skipped == []


def test_failed_stage_removes_its_outputs(tmp_path, small_config, monkeypatch, capsys):
    def explode(*args, **kwargs):
        raise NumericError("loss became NaN")

    monkeypatch.setattr(pipeline_mod, "repeat_experiment", explode)
    out = tmp_path / "o"
    assert main(["pipeline", "--config", str(small_config), "--out", str(out)]) == 4
    assert "stage train" in capsys.readouterr().err
    assert (out / "features" / "complete_31.jsonl").exists()
    assert not (out / "models").exists() and not (out / "curves").exists()
    assert not (out / "report.csv").exists()
    assert json.loads((out / "stages.json").read_text())["done"] == ["simulate", "ingest", "featurize"]


@pytest.mark.parametrize(
    "patch",
    [
        {"schemas": ["complete", "no_such_schema"]},
        {"schemas": ["complete", "machine"]},
        {"compare_schema": "event_only", "schemas": ["complete"]},
        {"horizon": 0},
        {"horizon": 500},
        {"repetitions": 0},
        {"cv_folds": 1},
        {"train": {"learning_rate": -1}},
        {"train": {"optimizer": "sgd"}},
        {"campaign": {"n_vms": 0}},
        {"unknown_key": 1},
    ],
)
def test_invalid_config_fails_before_any_stage(tmp_path, patch, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({**SMALL, **patch}))
    out = tmp_path / "never"
    assert main(["pipeline", "--config", str(path), "--out", str(out)]) == 2
    assert not out.exists()
    assert "error:" in capsys.readouterr().err


def test_validation_error_is_also_value_error():
    with pytest.raises(ValueError):
        PipelineConfig(horizon=0).validate()
    assert issubclass(ValidationError, ValueError)


# --------------------------------------------------------------------------- exit codes and seeds


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["simulate"]) == 2
    assert main(["train", "--train", "x", "--out", "y", "--cell", "rnn"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pipeline", "--config", str(bad)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "s")]) == 2


def test_missing_inputs_exit_3(tmp_path):
    assert main(["ingest", "--events", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "a.jsonl")]) == 3
    assert main(["eval", "--model", str(tmp_path / "m"), "--test", str(tmp_path / "t"), "--out", str(tmp_path / "c")]) == 3
    corrupt = tmp_path / "model.json"
    corrupt.write_text('{"format": "procsight.model", "format_version": 1')
    matrix = tmp_path / "t.jsonl"
    write_matrix([FeatureSequence(EVENT_ONLY, np.eye(5)[[0]], [0], "benign", "a")], matrix, EVENT_ONLY)
    assert main(["eval", "--model", str(corrupt), "--test", str(matrix), "--out", str(tmp_path / "c")]) == 3


def test_numeric_failure_exits_4(tmp_path):
    rng = np.random.default_rng(0)
    seqs = [
        FeatureSequence(EVENT_ONLY, np.eye(5)[rng.integers(0, 5, 4)], [0, 1000, 2000, 3000],
                        "malicious" if k % 2 else "benign", f"s{k}")
        for k in range(20)
    ]
    seqs[3].vectors[1, 2] = np.nan
    write_matrix(seqs, tmp_path / "nan.jsonl", EVENT_ONLY)
    assert main(["train", "--train", str(tmp_path / "nan.jsonl"), "--epochs", "2", "--out", str(tmp_path / "m.json")]) == 4
    assert not (tmp_path / "m.json").exists()


def test_seed_environment_override(tmp_path, monkeypatch):
    args = ["simulate", "--n-malicious", "4", "--n-benign", "6"]
    assert main(args + ["--seed", "9", "--out", str(tmp_path / "flag9")]) == 0
    monkeypatch.setenv("PROCSIGHT_SEED", "9")
    assert main(args + ["--seed", "1", "--out", str(tmp_path / "env9")]) == 0
    assert _tree(tmp_path / "flag9") == _tree(tmp_path / "env9")
    monkeypatch.setenv("PROCSIGHT_SEED", "nine")
    assert main(args + ["--out", str(tmp_path / "bad")]) == 2


def test_seed_environment_reaches_pipeline(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv("PROCSIGHT_SEED", "11")
    assert main(["pipeline", "--config", str(small_config), "--out", str(tmp_path / "o")]) == 0
    stamp = json.loads((tmp_path / "o" / "config.json").read_text())["stamp"]
    assert stamp["seed"] == 11


# --------------------------------------------------------------------------- subcommands end to end


def test_subcommands_chain(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "--seed", "3", "--n-malicious", "20", "--n-benign", "20", "--out", str(sim)]) == 0
    acts = tmp_path / "acts.jsonl"
    assert main(["ingest", "--events", str(sim / "events.jsonl"), "--hollows", str(sim / "hollows.jsonl"),
                 "--manifest", str(sim / "manifest.json"), "--out", str(acts)]) == 0
    stats = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert stats["activities"] > 0 and stats["hollows_attached"] > 0
    activities = read_activities(acts)
    assert sum(a.label == "malicious" for a in activities) == 20

    curves = {}
    for schema, source in (("complete", acts), ("machine", sim)):
        feats = tmp_path / f"{schema}.jsonl"
        assert main(["featurize", "--schema", schema, "--in", str(source), "--out", str(feats)]) == 0
        model, test = tmp_path / f"{schema}.model.json", tmp_path / f"{schema}.test.jsonl"
        assert main(["train", "--train", str(feats), "--epochs", "3", "--hidden", "6", "--horizon", "10",
                     "--test-out", str(test), "--out", str(model)]) == 0
        curves[schema] = tmp_path / f"{schema}.csv"
        assert main(["eval", "--model", str(model), "--test", str(test), "--horizon", "10",
                     "--out", str(curves[schema])]) == 0
        assert len(read_curve_csv(curves[schema])) == 10

    report = tmp_path / "report.csv"
    assert main(["report", "--compare", str(curves["machine"]), str(curves["complete"]), "--out", str(report)]) == 0
    assert report.read_text().startswith("t,machine_f1")
    assert main(["featurize", "--schema", "machine", "--in", str(acts), "--out", str(tmp_path / "x")]) == 2
    assert main(["eval", "--model", str(tmp_path / "complete.model.json"), "--test", str(tmp_path / "complete.test.jsonl"),
                 "--horizon", "0", "--out", str(tmp_path / "y")]) == 2
