"""Partitioning, metrics and per-second evaluation curves."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import PartitionError, ProcsightError, SchemaError, ValidationError
from .features import FeatureSequence, truncate_to_horizon
from .rnn import RnnModel, TrainConfig, label_of, predict_many, train

log = logging.getLogger(__name__)

CURVE_FIELDS = ("t", "n", "accuracy", "precision", "recall", "f1", "fpr", "no_data_count")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_pairs(cls, predicted, actual) -> "ConfusionCounts":
        """Tally ``(prediction, label)`` pairs; either side may be bool/int or label strings."""
        tp = tn = fp = fn = 0
        for p, a in zip(predicted, actual):
            p = p == "malicious" if isinstance(p, str) else bool(p)
            a = a == "malicious" if isinstance(a, str) else bool(a)
            if p and a:
                tp += 1
            elif p:
                fp += 1
            elif a:
                fn += 1
            else:
                tn += 1
        return cls(tp, tn, fp, fn)


@dataclass(frozen=True)
class MetricRow:
    t: int
    n: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    no_data_count: int = 0
    degenerate: tuple = ()

    def as_csv_row(self) -> list:
        return [self.t, self.n] + [f"{getattr(self, k):.6f}" for k in CURVE_FIELDS[2:7]] + [self.no_data_count]


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts, t: int = 0, no_data_count: int = 0) -> MetricRow:
    """Accuracy (percent), precision, recall, F1 and FPR from a confusion tally.

    Any ratio with a zero denominator is reported as 0 and named in
    ``degenerate``.
    """
    if c.total <= 0:
        raise ValueError("empty confusion counts")
    degenerate = []
    accuracy = (c.tp + c.tn) / c.total * 100
    precision = _ratio(c.tp, c.tp + c.fp, "precision", degenerate)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", degenerate)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", degenerate)
    fpr = _ratio(c.fp, c.fp + c.tn, "fpr", degenerate)
    return MetricRow(t, c.total, accuracy, precision, recall, f1, fpr, no_data_count, tuple(degenerate))


# --------------------------------------------------------------------------- partitioning


@dataclass
class Split:
    train: list
    test: list
    leftover: list


def split_undersample(samples: Sequence, seed: int, train_fraction: float = 0.8, label=None) -> Split:
    """Balanced train/test partition with the benign class undersampled.

    Malicious samples are split ``train_fraction`` / rest; each side then gets
    as many benign samples, drawn without replacement. Unused benign samples
    are returned as ``leftover``. ``label`` extracts the label of a sample
    (default: its ``.label`` attribute).
    """
    label = label or (lambda s: s.label)
    mal = [k for k, s in enumerate(samples) if label(s) == "malicious"]
    ben = [k for k, s in enumerate(samples) if label(s) == "benign"]
    if not mal or not ben:
        raise PartitionError(f"both classes required (malicious={len(mal)}, benign={len(ben)})")
    if len(ben) < len(mal):
        raise PartitionError(f"need at least {len(mal)} benign samples to balance, have {len(ben)}")
    rng = np.random.default_rng(seed)
    mal = rng.permutation(mal)
    ben = rng.permutation(ben)
    n_train = int(round(len(mal) * train_fraction))
    n_test = len(mal) - n_train
    train = list(mal[:n_train]) + list(ben[:n_train])
    test = list(mal[n_train:]) + list(ben[n_train : n_train + n_test])
    leftover = list(ben[n_train + n_test :])
    pick = lambda idx: [samples[int(k)] for k in sorted(idx)]
    return Split(pick(train), pick(test), pick(leftover))


def kfold(n: int, k: int = 10, seed: int = 0) -> list:
    """``k`` shuffled ``(fit, validate)`` index partitions of ``range(n)``.

    The first ``n % k`` folds hold one extra element.
    """
    if n < k:
        raise PartitionError(f"need at least {k} samples for {k}-fold, have {n}")
    order = np.random.default_rng(seed).permutation(n)
    sizes = [n // k + (1 if f < n % k else 0) for f in range(k)]
    bounds = np.cumsum([0] + sizes)
    folds = []
    for f in range(k):
        val = np.sort(order[bounds[f] : bounds[f + 1]])
        fit = np.sort(np.concatenate([order[: bounds[f]], order[bounds[f + 1] :]]))
        folds.append((fit, val))
    return folds


# --------------------------------------------------------------------------- curves


def per_second_curve(model, testset: Sequence[FeatureSequence], horizon: int = 30, scorer=None) -> list:
    """Score every test sequence truncated to 1..horizon seconds.

    ``model`` is an :class:`RnnModel`, or any object when ``scorer`` is given
    (``scorer(model, seqs) -> probabilities``). Sequences with nothing
    observed by ``t`` are called benign and counted in ``no_data_count``.
    """
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    if scorer is None:
        scorer = predict_many
        for s in testset:
            if s.schema_id != model.schema_id:
                raise SchemaError(f"test schema {s.schema_id} does not match model schema {model.schema_id}")
    labels = [s.label for s in testset]
    rows = []
    for t in range(1, horizon + 1):
        cut = [truncate_to_horizon(s, t) for s in testset]
        live = [k for k, s in enumerate(cut) if len(s)]
        preds = ["benign"] * len(cut)
        if live:
            probs = scorer(model, [cut[k] for k in live])
            for k, p in zip(live, probs):
                preds[k] = label_of(p)
        counts = ConfusionCounts.from_pairs(preds, labels)
        rows.append(metrics(counts, t=t, no_data_count=len(cut) - len(live)))
    return rows


def mean_curve(runs: Sequence[Sequence[MetricRow]]) -> list:
    """Element-wise mean of equally long curves."""
    if not runs:
        raise ValueError("no curves to average")
    out = []
    for rows in zip(*runs):
        vals = {k: float(np.mean([getattr(r, k) for r in rows])) for k in ("accuracy", "precision", "recall", "f1", "fpr")}
        out.append(
            MetricRow(
                t=rows[0].t,
                n=int(round(np.mean([r.n for r in rows]))),
                no_data_count=int(round(np.mean([r.no_data_count for r in rows]))),
                **vals,
            )
        )
    return out


@dataclass
class ExperimentConfig:
    """One split -> train -> per-second-curve experiment over a fixed dataset."""

    train: TrainConfig = field(default_factory=TrainConfig)
    horizon: int = 30
    train_horizon: Optional[int] = 30
    train_fraction: float = 0.8
    cv_folds: int = 0
    train_prefixes: Optional[tuple] = None

    def validate(self):
        self.train.validate()
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.train_horizon is not None and self.train_horizon < 1:
            raise ValidationError("train_horizon must be >= 1")


@dataclass
class RunResult:
    seed: int
    curve: list
    loss_trace: list
    cv: list = field(default_factory=list)
    model: Optional[RnnModel] = None


@dataclass
class RepeatResult:
    mean: list
    runs: list


def derive_seeds(master_seed: int, n: int) -> list:
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in np.random.SeedSequence(master_seed).spawn(n)]


def _clip(seqs, horizon):
    if horizon is None:
        return list(seqs)
    out = [truncate_to_horizon(s, horizon) for s in seqs]
    return [s for s in out if len(s)]


def cross_validate(train_set: Sequence[FeatureSequence], config: ExperimentConfig, seed: int) -> list:
    """k-fold validation on the training partition; one MetricRow per fold (full-length scoring)."""
    rows = []
    for fold, (fit_idx, val_idx) in enumerate(kfold(len(train_set), config.cv_folds, seed)):
        fit = _clip([train_set[k] for k in fit_idx], config.train_horizon)
        val = _clip([train_set[k] for k in val_idx], config.train_horizon)
        tc = replace(config.train, seed=seed + fold + 1)
        model, _ = train(fit, tc, prefix_horizons=config.train_prefixes)
        preds = [label_of(p) for p in predict_many(model, val)]
        rows.append(metrics(ConfusionCounts.from_pairs(preds, [s.label for s in val]), t=fold))
    return rows


def run_experiment(dataset: Sequence[FeatureSequence], config: ExperimentConfig, seed: int, keep_model=False) -> RunResult:
    split = split_undersample(dataset, seed, config.train_fraction)
    train_set = _clip(split.train, config.train_horizon)
    model, trace = train(train_set, replace(config.train, seed=seed), prefix_horizons=config.train_prefixes)
    cv = cross_validate(split.train, config, seed) if config.cv_folds else []
    curve = per_second_curve(model, split.test, config.horizon)
    return RunResult(seed, curve, trace, cv, model if keep_model else None)


def repeat_experiment(
    dataset: Sequence[FeatureSequence],
    config: ExperimentConfig,
    n: int = 10,
    master_seed: int = 0,
    runner: Optional[Callable] = None,
) -> RepeatResult:
    """Repeat ``runner`` (default :func:`run_experiment`) under derived seeds and average."""
    if n < 1:
        raise ValueError("n must be >= 1")
    config.validate()
    runner = runner or run_experiment
    runs = []
    for k, seed in enumerate(derive_seeds(master_seed, n)):
        try:
            runs.append(runner(dataset, config, seed))
        except ProcsightError as exc:
            exc.run = k
            exc.args = (f"run {k} (seed {seed}): {exc}",)
            raise
        log.info("run %d/%d done (seed %d)", k + 1, n, seed)
    return RepeatResult(mean_curve([r.curve for r in runs]), runs)


# --------------------------------------------------------------------------- reports


def curve_to_csv(rows: Sequence[MetricRow], stamp: Optional[str] = None) -> str:
    buf = io.StringIO()
    if stamp:
        buf.write(f"# {stamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for r in rows:
        w.writerow(r.as_csv_row())
    return buf.getvalue()


def read_curve_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(
            MetricRow(
                t=int(rec["t"]),
                n=int(rec["n"]),
                accuracy=float(rec["accuracy"]),
                precision=float(rec["precision"]),
                recall=float(rec["recall"]),
                f1=float(rec["f1"]),
                fpr=float(rec["fpr"]),
                no_data_count=int(rec.get("no_data_count") or 0),
            )
        )
    return rows


@dataclass
class Comparison:
    rows: list
    mean_recall_delta: float
    mean_f1_delta: float
    max_process_fpr: float
    max_machine_fpr: float

    def to_csv(self, stamp: Optional[str] = None) -> str:
        buf = io.StringIO()
        if stamp:
            buf.write(f"# {stamp}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "machine_f1", "process_f1", "f1_delta", "machine_recall", "process_recall", "recall_delta",
                    "machine_fpr", "process_fpr", "fpr_delta"])
        for r in self.rows:
            w.writerow([r["t"]] + [f"{r[k]:.6f}" for k in list(r)[1:]])
        w.writerow([])
        w.writerow(["summary", "mean_f1_delta", f"{self.mean_f1_delta:.6f}"])
        w.writerow(["summary", "mean_recall_delta", f"{self.mean_recall_delta:.6f}"])
        w.writerow(["summary", "max_machine_fpr", f"{self.max_machine_fpr:.6f}"])
        w.writerow(["summary", "max_process_fpr", f"{self.max_process_fpr:.6f}"])
        return buf.getvalue()


def compare_levels(machine_curves: Sequence[MetricRow], process_curves: Sequence[MetricRow]) -> Comparison:
    """Per-second process-minus-machine deltas over the shared horizon."""
    mach = {r.t: r for r in machine_curves}
    proc = {r.t: r for r in process_curves}
    shared = sorted(set(mach) & set(proc))
    if not shared:
        raise ValueError("machine and process curves share no time steps")
    rows = []
    for t in shared:
        m, p = mach[t], proc[t]
        rows.append(
            {
                "t": t,
                "machine_f1": m.f1,
                "process_f1": p.f1,
                "f1_delta": p.f1 - m.f1,
                "machine_recall": m.recall,
                "process_recall": p.recall,
                "recall_delta": p.recall - m.recall,
                "machine_fpr": m.fpr,
                "process_fpr": p.fpr,
                "fpr_delta": p.fpr - m.fpr,
            }
        )
    return Comparison(
        rows=rows,
        mean_recall_delta=float(np.mean([r["recall_delta"] for r in rows])),
        mean_f1_delta=float(np.mean([r["f1_delta"] for r in rows])),
        max_process_fpr=max(r["process_fpr"] for r in rows),
        max_machine_fpr=max(r["machine_fpr"] for r in rows),
    )
