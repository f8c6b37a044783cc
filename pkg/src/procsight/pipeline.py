"""End-to-end orchestration: simulate -> ingest -> featurize -> train/eval -> report.

Every artifact carries the same stamp (config hash, master seed, format
version), so a directory of outputs can always be traced back to the
configuration that produced it.  Nothing time- or host-dependent is written,
which keeps reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from pathlib import Path
from typing import Optional

from .campaign import CampaignConfig, generate_dataset, manifest_labels, read_machine_dataset, write_dataset
from .errors import ProcsightError, ValidationError
from .evaluation import ExperimentConfig, compare_levels, curve_to_csv, read_curve_csv, repeat_experiment, run_experiment
from .features import COMPLETE, EVENT_ONLY, MACHINE, encode_complete, encode_event_only, encode_machine
from .features import read_matrix, resolve_schema, write_matrix
from .ingest import apply_labels, ingest, read_activities, write_activities
from .persistence import save_model
from .rnn import FORMAT_VERSION, TrainConfig

log = logging.getLogger(__name__)

STAGES = ("simulate", "ingest", "featurize", "train", "report")
PROCESS_ENCODERS = {EVENT_ONLY: encode_event_only, COMPLETE: encode_complete}


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "procsight-out"
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    window_secs: int = 120
    # process-level schemas to train; the machine model is always trained
    schemas: tuple = (COMPLETE, EVENT_ONLY)
    compare_schema: str = COMPLETE
    train: TrainConfig = field(default_factory=TrainConfig)
    horizon: int = 30
    repetitions: int = 3
    cv_folds: int = 0
    # supervise every second 1..horizon (True) or only the full sequence (False)
    prefix_supervision: bool = True
    timestamp_scale: Optional[float] = None
    # reuse stage outputs already stamped with this config's hash
    resume: bool = False

    def validate(self) -> "PipelineConfig":
        ids = [resolve_schema(s).schema_id for s in self.schemas]
        if MACHINE in ids:
            raise ValidationError("the machine schema is trained implicitly; list only process schemas")
        if resolve_schema(self.compare_schema).schema_id not in ids:
            raise ValidationError(f"compare_schema {self.compare_schema!r} is not among schemas {list(self.schemas)}")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate schema ids")
        if not 1 <= self.horizon <= self.campaign.window_secs:
            raise ValidationError(f"horizon must lie in [1, {self.campaign.window_secs}]")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")
        if self.cv_folds == 1 or self.cv_folds < 0:
            raise ValidationError("cv_folds must be 0 (off) or >= 2")
        if self.window_secs <= 0:
            raise ValidationError("window_secs must be > 0")
        self.train.validate()
        self.campaign.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schemas"] = list(self.schemas)
        d["campaign"] = self.campaign.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown pipeline keys {sorted(unknown)}")
        if "campaign" in d:
            d["campaign"] = CampaignConfig.from_dict(d["campaign"])
        if "train" in d:
            try:
                d["train"] = TrainConfig(**d["train"])
            except TypeError as exc:
                raise ValidationError(f"bad train section: {exc}") from exc
        if "schemas" in d:
            d["schemas"] = tuple(d["schemas"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc

    def effective(self) -> "PipelineConfig":
        """The config actually executed: the master seed also seeds the campaign."""
        return replace(self, campaign=replace(self.campaign, seed=self.seed))

    def config_hash(self) -> str:
        # out_dir and resume only say where/how to write, not what gets computed
        d = self.effective().to_dict()
        d.pop("out_dir")
        d.pop("resume")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def stamp_of(config: PipelineConfig) -> dict:
    return {"config_hash": config.config_hash(), "seed": config.seed, "format_version": FORMAT_VERSION}


def stamp_line(stamp: dict) -> str:
    return " ".join(f"{k}={stamp[k]}" for k in ("config_hash", "seed", "format_version"))


def experiment_config(config: PipelineConfig) -> ExperimentConfig:
    prefixes = tuple(range(1, config.horizon + 1)) if config.prefix_supervision else None
    return ExperimentConfig(
        train=config.train,
        horizon=config.horizon,
        train_horizon=config.horizon,
        cv_folds=config.cv_folds,
        train_prefixes=prefixes,
    )


@dataclass
class PipelineResult:
    out_dir: Path
    artifacts: dict
    stamp: dict
    skipped: list


class _Run:
    """Stage bookkeeping: paths, stamps, resume checks and cleanup on failure."""

    def __init__(self, config: PipelineConfig):
        self.config = config.effective()
        self.out = Path(config.out_dir)
        self.stamp = stamp_of(config)
        self.state_path = self.out / "stages.json"
        self.paths = {
            "simulate": self.out / "sim",
            "activities": self.out / "activities.jsonl",
            "features": self.out / "features",
            "models": self.out / "models",
            "curves": self.out / "curves",
            "report": self.out / "report.csv",
        }
        self.state = self._load_state()
        self.skipped = []

    def _load_state(self) -> dict:
        if self.config.resume and self.state_path.exists():
            with open(self.state_path, encoding="utf-8") as fh:
                state = json.load(fh)
            if state.get("stamp") == self.stamp:
                return state
        return {"stamp": self.stamp, "done": []}

    def _save_state(self):
        with open(self.state_path, "w", encoding="utf-8") as fh:
            json.dump(self.state, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def stage(self, name: str, outputs: list, fn):
        if self.config.resume and name in self.state["done"] and all(p.exists() for p in outputs):
            log.info("stage %s: reusing stamped outputs", name)
            self.skipped.append(name)
            return
        self.state["done"] = [s for s in self.state["done"] if STAGES.index(s) < STAGES.index(name)]
        self._save_state()
        log.info("stage %s", name)
        try:
            fn()
        except ProcsightError as exc:
            _remove(outputs, self.out)
            exc.stage = name
            exc.args = (f"stage {name}: {exc}",)
            raise
        except Exception:
            _remove(outputs, self.out)
            raise
        self.state["done"].append(name)
        self._save_state()


def _remove(paths, root: Path):
    """Delete stage outputs, then any stage directory they leave empty."""
    for p in paths:
        if p.is_dir():
            shutil.rmtree(p)
        elif p.exists():
            p.unlink()
    for parent in {p.parent for p in paths}:
        if parent != root and parent.is_dir() and not any(parent.iterdir()):
            parent.rmdir()


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run every stage in order and return the artifact paths."""
    config.validate()
    run = _Run(config)
    cfg, paths, stamp = run.config, run.paths, run.stamp
    run.out.mkdir(parents=True, exist_ok=True)
    with open(run.out / "config.json", "w", encoding="utf-8") as fh:
        json.dump({**cfg.to_dict(), "stamp": stamp}, fh, indent=1, sort_keys=True)
        fh.write("\n")

    process_ids = [resolve_schema(s).schema_id for s in cfg.schemas]
    all_ids = [MACHINE] + process_ids
    matrix = {sid: paths["features"] / f"{sid}.jsonl" for sid in all_ids}
    curve = {sid: paths["curves"] / f"{sid}.csv" for sid in all_ids}
    model = {sid: paths["models"] / f"{sid}.model.json" for sid in all_ids}

    def simulate():
        ds = generate_dataset(cfg.campaign)
        write_dataset(ds, paths["simulate"])
        with open(paths["simulate"] / "stamp.json", "w", encoding="utf-8") as fh:
            json.dump(stamp, fh, sort_keys=True)
            fh.write("\n")

    def ingest_stage():
        sim = paths["simulate"]
        activities, stats = ingest([sim / "events.jsonl"], sim / "hollows.jsonl", cfg.window_secs)
        with open(sim / "manifest.json", encoding="utf-8") as fh:
            by_guid, by_key = manifest_labels(json.load(fh))
        activities = apply_labels(activities, by_guid, by_key)
        write_activities(activities, paths["activities"], {"stamp": stamp, "stats": stats})

    def featurize():
        paths["features"].mkdir(parents=True, exist_ok=True)
        acts = [a for a in read_activities(paths["activities"]) if a.label != "unknown"]
        for sid in process_ids:
            enc = PROCESS_ENCODERS[sid]
            seqs = [enc(a, timestamp_scale=cfg.timestamp_scale) if sid == COMPLETE else enc(a) for a in acts]
            write_matrix(seqs, matrix[sid], sid, {"stamp": stamp})
        series = read_machine_dataset(paths["simulate"])
        write_matrix([encode_machine(s) for s in series], matrix[MACHINE], MACHINE, {"stamp": stamp})

    def train_eval():
        paths["models"].mkdir(parents=True, exist_ok=True)
        paths["curves"].mkdir(parents=True, exist_ok=True)
        ec = experiment_config(cfg)
        for sid in all_ids:
            _, seqs = read_matrix(matrix[sid])
            res = repeat_experiment(seqs, ec, n=cfg.repetitions, master_seed=cfg.seed,
                                    runner=partial(run_experiment, keep_model=True))
            save_model(res.runs[0].model, model[sid], stamp)
            curve[sid].write_text(curve_to_csv(res.mean, stamp_line(stamp)), encoding="utf-8")
            log.info("%s: mean F1 over t = %.3f", sid, sum(r.f1 for r in res.mean) / len(res.mean))

    def report():
        target = resolve_schema(cfg.compare_schema).schema_id
        cmp = compare_levels(read_curve_csv(curve[MACHINE]), read_curve_csv(curve[target]))
        paths["report"].write_text(cmp.to_csv(stamp_line(stamp)), encoding="utf-8")

    run.stage("simulate", [paths["simulate"]], simulate)
    run.stage("ingest", [paths["activities"]], ingest_stage)
    run.stage("featurize", list(matrix.values()), featurize)
    run.stage("train", list(model.values()) + list(curve.values()), train_eval)
    run.stage("report", [paths["report"]], report)

    artifacts = {
        "simulate": paths["simulate"],
        "activities": paths["activities"],
        **{f"matrix:{sid}": p for sid, p in matrix.items()},
        **{f"model:{sid}": p for sid, p in model.items()},
        **{f"curve:{sid}": p for sid, p in curve.items()},
        "report": paths["report"],
    }
    return PipelineResult(run.out, artifacts, stamp, run.skipped)
