from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import recount
from procsight.errors import PartitionError, SchemaError, TrainingError
from procsight.evaluation import (
    ConfusionCounts,
    ExperimentConfig,
    MetricRow,
    RunResult,
    compare_levels,
    curve_to_csv,
    derive_seeds,
    kfold,
    mean_curve,
    metrics,
    per_second_curve,
    read_curve_csv,
    repeat_experiment,
    run_experiment,
    split_undersample,
)
from procsight.features import EVENT_ONLY, FeatureSequence
from procsight.rnn import TrainConfig


@dataclass(frozen=True)
class Item:
    uid: int
    label: str


def items(n_mal, n_ben):
    return [Item(k, "malicious") for k in range(n_mal)] + [Item(n_mal + k, "benign") for k in range(n_ben)]


# --------------------------------------------------------------------------- metrics


def test_metric_examples():
    r = metrics(ConfusionCounts(tp=1, tn=1))
    assert (r.accuracy, r.precision, r.recall, r.f1, r.fpr) == (100.0, 1.0, 1.0, 1.0, 0.0)
    r = metrics(ConfusionCounts(tp=60, fn=40))
    assert r.recall == 0.6 and r.fpr == 0.0 and "fpr" in r.degenerate
    r = metrics(ConfusionCounts(tp=50, tn=30, fp=10, fn=10))
    assert r.accuracy == 80.0
    assert round(r.precision, 4) == round(r.recall, 4) == round(r.f1, 4) == 0.8333
    assert r.fpr == 0.25


def test_f1_zero_when_no_positive_hits():
    r = metrics(ConfusionCounts(tn=5, fn=3))
    assert r.f1 == 0.0 and r.precision == 0.0 and {"precision", "f1"} <= set(r.degenerate)


def test_empty_confusion_rejected():
    with pytest.raises(ValueError):
        metrics(ConfusionCounts())


@given(st.lists(st.tuples(st.sampled_from(["benign", "malicious"]), st.sampled_from(["benign", "malicious"])),
                min_size=1, max_size=60))
def test_metrics_match_recount(pairs):
    preds, labels = zip(*pairs)
    got = metrics(ConfusionCounts.from_pairs(preds, labels))
    want = recount(preds, labels)
    assert {k: getattr(got, k) for k in want} == want
    assert got.n == len(pairs)
    assert 0 <= got.accuracy <= 100 and all(0 <= getattr(got, k) <= 1 for k in ("precision", "recall", "f1", "fpr"))


# --------------------------------------------------------------------------- split and folds


def test_split_reference_counts():
    s = split_undersample(items(525, 900), seed=0)
    count = lambda xs, lab: sum(x.label == lab for x in xs)
    assert (count(s.train, "malicious"), count(s.train, "benign")) == (420, 420)
    assert (count(s.test, "malicious"), count(s.test, "benign")) == (105, 105)
    assert len(s.leftover) == 900 - 525
    assert not {x.uid for x in s.train} & {x.uid for x in s.test}


def test_split_small_and_errors():
    s = split_undersample(items(10, 10), seed=3)
    assert (len(s.train), len(s.test)) == (16, 4)
    with pytest.raises(PartitionError, match="10"):
        split_undersample(items(10, 9), seed=0)
    with pytest.raises(PartitionError):
        split_undersample(items(0, 9), seed=0)


@settings(max_examples=50)
@given(st.integers(1, 60), st.integers(0, 60), st.integers(0, 2**32 - 1))
def test_split_properties(n_mal, extra, seed):
    data = items(n_mal, n_mal + extra)
    s = split_undersample(data, seed)
    uids = [x.uid for x in s.train + s.test + s.leftover]
    assert sorted(uids) == list(range(len(data)))
    for part in (s.train, s.test):
        assert sum(x.label == "malicious" for x in part) == sum(x.label == "benign" for x in part)
    assert s == split_undersample(data, seed)


def test_kfold_examples():
    folds = kfold(100, 10, seed=1)
    assert [len(v) for _, v in folds] == [10] * 10
    folds = kfold(105, 10, seed=1)
    assert sorted(len(v) for _, v in folds) == [10] * 5 + [11] * 5
    allv = np.concatenate([v for _, v in folds])
    assert sorted(allv.tolist()) == list(range(105))
    for fit, val in folds:
        assert not set(fit) & set(val) and len(fit) + len(val) == 105
    with pytest.raises(PartitionError):
        kfold(9, 10)


# --------------------------------------------------------------------------- curves


class Constant:
    schema_id = EVENT_ONLY

    def __init__(self, p):
        self.p = p


def constant_scorer(model, seqs):
    return np.full(len(seqs), model.p)


def fixture_seqs(late_malicious=False):
    seqs = []
    for k in range(6):
        mal = k % 2 == 0
        start = 5500 if (mal and late_malicious) else 0
        seqs.append(FeatureSequence(EVENT_ONLY, np.eye(5)[[0, 1, 1]], [start, start + 200, start + 900],
                                    "malicious" if mal else "benign", f"s{k}"))
    return seqs


def test_constant_classifiers():
    seqs = fixture_seqs()
    for row in per_second_curve(Constant(0.9), seqs, 5, constant_scorer):
        assert (row.recall, row.fpr) == (1.0, 1.0)
    for row in per_second_curve(Constant(0.1), seqs, 5, constant_scorer):
        assert (row.recall, row.fpr) == (0.0, 0.0)


def test_no_data_convention():
    rows = per_second_curve(Constant(0.9), fixture_seqs(late_malicious=True), 8, constant_scorer)
    assert [r.recall for r in rows[:5]] == [0.0] * 5
    assert [r.no_data_count for r in rows[:5]] == [3] * 5
    assert rows[5].recall == 1.0 and rows[5].no_data_count == 0


def test_curve_schema_mismatch():
    from procsight.rnn import RnnModel, zero_params

    m = RnnModel("gru", 10, 2, zero_params("gru", 10, 2), "machine_10")
    with pytest.raises(SchemaError):
        per_second_curve(m, fixture_seqs(), 3)


def _row(t, f1=0.5, recall=0.5, fpr=0.1, acc=50.0):
    return MetricRow(t, 10, acc, 0.5, recall, f1, fpr)


def test_mean_curve_bounds():
    runs = [[_row(1, f1=0.2), _row(2, f1=0.4)], [_row(1, f1=0.6), _row(2, f1=0.4)]]
    mean = mean_curve(runs)
    assert [r.f1 for r in mean] == [0.4, 0.4]
    assert mean_curve(runs[:1]) == runs[0]


def test_curve_csv_round_trip(tmp_path):
    rows = [_row(1, f1=0.123456789), _row(2)]
    path = tmp_path / "c.csv"
    path.write_text(curve_to_csv(rows, "config_hash=x seed=1 format_version=1"))
    back = read_curve_csv(path)
    assert [r.t for r in back] == [1, 2] and back[0].f1 == 0.123457
    assert path.read_text().startswith("# config_hash=x")


def test_compare_levels_examples():
    same = [_row(t) for t in range(1, 4)]
    cmp = compare_levels(same, same)
    assert all(r["f1_delta"] == 0 and r["recall_delta"] == 0 for r in cmp.rows)
    cmp = compare_levels([_row(t, f1=0.80) for t in (1, 2)], [_row(t, f1=0.87) for t in (1, 2)])
    assert all(abs(r["f1_delta"] - 0.07) < 1e-12 for r in cmp.rows)
    with pytest.raises(ValueError):
        compare_levels([_row(1)], [_row(2)])
    assert "mean_recall_delta" in cmp.to_csv()


# --------------------------------------------------------------------------- experiments


def toy_dataset(n=20):
    out = []
    for k in range(n):
        mal = k % 2 == 0
        ids = [0, 1, 1, 4] if mal else [0, 4, 4, 2]
        out.append(FeatureSequence(EVENT_ONLY, np.eye(5)[ids], [0, 800, 1600, 2400], "malicious" if mal else "benign", f"t{k}"))
    return out


FAST = ExperimentConfig(train=TrainConfig(epochs=15, hidden_width=6), horizon=3, train_horizon=3)


def test_run_and_repeat_are_deterministic():
    data = toy_dataset()
    a = repeat_experiment(data, FAST, n=2, master_seed=7)
    b = repeat_experiment(data, FAST, n=2, master_seed=7)
    assert a.mean == b.mean and len(a.runs) == 2
    one = repeat_experiment(data, FAST, n=1, master_seed=7)
    assert one.mean == mean_curve([one.runs[0].curve])
    for t, row in enumerate(a.mean):
        lo = min(r.curve[t].f1 for r in a.runs)
        hi = max(r.curve[t].f1 for r in a.runs)
        assert lo - 1e-12 <= row.f1 <= hi + 1e-12


def test_repeat_identical_runs_give_identical_mean():
    fixed = [_row(1, f1=0.3), _row(2, f1=0.9)]
    res = repeat_experiment([], FAST, n=4, runner=lambda d, c, s: RunResult(s, fixed, []))
    assert res.mean == fixed


def test_repeat_attaches_run_index():
    def runner(data, config, seed):
        raise TrainingError("boom")

    with pytest.raises(TrainingError, match="run 0") as info:
        repeat_experiment([], FAST, n=3, runner=runner)
    assert info.value.run == 0


def test_derive_seeds_stable():
    assert derive_seeds(0, 3) == derive_seeds(0, 3)
    assert len(set(derive_seeds(0, 10))) == 10


def test_cross_validation_rows():
    cfg = ExperimentConfig(train=TrainConfig(epochs=5, hidden_width=4), horizon=3, train_horizon=3, cv_folds=4)
    res = run_experiment(toy_dataset(24), cfg, seed=1)
    assert len(res.cv) == 4 and all(r.n > 0 for r in res.cv)
