"""``procsight`` command line.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 data error,
4 numeric failure.  ``PROCSIGHT_SEED`` in the environment overrides every
seed given by flag or config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .campaign import CampaignConfig, generate_dataset, manifest_labels, read_machine_dataset, write_dataset
from .errors import DataError, ProcsightError, ValidationError
from .evaluation import compare_levels, curve_to_csv, per_second_curve, read_curve_csv, split_undersample
from .features import COMPLETE, MACHINE, encode_complete, encode_event_only, encode_machine
from .features import read_matrix, resolve_schema, truncate_to_horizon, write_matrix
from .ingest import apply_labels, ingest, read_activities, write_activities
from .persistence import load_model, save_model
from .pipeline import PipelineConfig, run_pipeline
from .rnn import TrainConfig, train

log = logging.getLogger("procsight")

SEED_ENV = "PROCSIGHT_SEED"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage already; route it through ValidationError
    # so main() owns every exit path.
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _seed(flag_value, config_value=0) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env, 0)
        except ValueError as exc:
            raise ValidationError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return int(flag_value) if flag_value is not None else int(config_value)


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from exc


def _require_file(path, what="input"):
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")


# --------------------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    cfg = CampaignConfig.from_dict(_load_json(args.config)) if args.config else CampaignConfig()
    cfg = replace(cfg, seed=_seed(args.seed, cfg.seed))
    if args.n_malicious is not None:
        cfg = replace(cfg, n_malicious=args.n_malicious)
    if args.n_benign is not None:
        cfg = replace(cfg, n_benign=args.n_benign)
    if args.no_background:
        cfg = replace(cfg, background_noise=False)
    cfg.validate()
    ds = generate_dataset(cfg)
    paths = write_dataset(ds, args.out)
    print(f"wrote {len(ds.activities)} activities, {len(ds.machine_series)} machine series to {args.out}")
    for name, p in sorted(paths.items()):
        log.info("%s: %s", name, p)
    return 0


def cmd_ingest(args) -> int:
    for p in args.events:
        _require_file(p, "event log")
    if args.hollows:
        _require_file(args.hollows, "hollows report")
    if args.window_secs <= 0:
        raise ValidationError("--window-secs must be > 0")
    activities, stats = ingest(args.events, args.hollows, args.window_secs)
    if args.manifest:
        by_guid, by_key = manifest_labels(_load_json(args.manifest))
        activities = apply_labels(activities, by_guid, by_key)
    write_activities(activities, args.out, {"stats": stats})
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_featurize(args) -> int:
    schema = resolve_schema(args.schema)
    _require_file(args.inp)
    if schema.schema_id == MACHINE:
        if not Path(args.inp).is_dir():
            raise ValidationError("the machine schema reads a simulate output directory (--in <dir>)")
        seqs = [encode_machine(s) for s in read_machine_dataset(args.inp)]
    else:
        acts = read_activities(args.inp)
        if not args.keep_unlabelled:
            acts = [a for a in acts if a.label != "unknown"]
        if schema.schema_id == COMPLETE:
            seqs = [encode_complete(a, timestamp_scale=args.timestamp_scale) for a in acts]
        else:
            seqs = [encode_event_only(a) for a in acts]
    write_matrix(seqs, args.out, schema.schema_id)
    print(f"wrote {len(seqs)} {schema.schema_id} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    _require_file(args.train)
    try:
        base = TrainConfig(**_load_json(args.config)) if args.config else TrainConfig()
    except TypeError as exc:
        raise ValidationError(f"bad train config: {exc}") from exc
    overrides = {k: v for k, v in (("epochs", args.epochs), ("hidden_width", args.hidden), ("cell", args.cell)) if v is not None}
    cfg = replace(base, seed=_seed(args.seed, base.seed), **overrides)
    cfg.validate()
    header, seqs = read_matrix(args.train)
    if args.test_out:
        split = split_undersample(seqs, cfg.seed)
        seqs = split.train
        write_matrix(split.test, args.test_out, header["schema_id"])
    seqs = [s for s in (truncate_to_horizon(s, args.horizon) for s in seqs) if len(s)]
    prefixes = tuple(range(1, args.horizon + 1)) if args.prefix_supervision else None
    model, trace = train(seqs, cfg, schema_id=header["schema_id"], prefix_horizons=prefixes)
    save_model(model, args.out, {"seed": cfg.seed})
    print(f"trained {model.cell} on {len(seqs)} sequences; final loss {trace[-1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    _require_file(args.model, "model")
    _require_file(args.test)
    if args.horizon < 1:
        raise ValidationError("--horizon must be >= 1")
    model = load_model(args.model)
    _, seqs = read_matrix(args.test)
    rows = per_second_curve(model, seqs, args.horizon)
    Path(args.out).write_text(curve_to_csv(rows), encoding="utf-8")
    print(f"wrote {len(rows)} per-second rows to {args.out}")
    return 0


def cmd_report(args) -> int:
    machine_csv, process_csv = args.compare
    _require_file(machine_csv)
    _require_file(process_csv)
    try:
        cmp = compare_levels(read_curve_csv(machine_csv), read_curve_csv(process_csv))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    text = cmp.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg = replace(cfg, seed=_seed(args.seed, cfg.seed))
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.repetitions is not None:
        cfg = replace(cfg, repetitions=args.repetitions)
    if args.resume:
        cfg = replace(cfg, resume=True)
    result = run_pipeline(cfg)
    if result.skipped:
        print(f"reused stages: {', '.join(result.skipped)}")
    print(f"report: {result.artifacts['report']}")
    print(" ".join(f"{k}={v}" for k, v in sorted(result.stamp.items())))
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="procsight", description="Process- and machine-level telemetry detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic detonation campaign")
    s.add_argument("--config", help="campaign JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n-malicious", type=int)
    s.add_argument("--n-benign", type=int)
    s.add_argument("--no-background", action="store_true", help="disable background benignware")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="parse Sysmon logs into process activities")
    s.add_argument("--events", nargs="+", required=True)
    s.add_argument("--hollows")
    s.add_argument("--window-secs", type=float, default=120.0)
    s.add_argument("--manifest", help="simulate manifest supplying ground-truth labels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("featurize", help="encode activities or machine series as a matrix file")
    s.add_argument("--schema", required=True, help="event_only | complete | machine (or a full schema id)")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--timestamp-scale", type=float, default=None, help="divide the Complete timestamp column")
    s.add_argument("--keep-unlabelled", action="store_true")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="train an LSTM/GRU on a matrix file")
    s.add_argument("--train", required=True, help="matrix file")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--cell", choices=("lstm", "gru"))
    s.add_argument("--horizon", type=int, default=30)
    s.add_argument("--no-prefix-supervision", dest="prefix_supervision", action="store_false")
    s.add_argument("--test-out", help="hold out a balanced 20%% split and write it here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-second metric curve of a model on a matrix file")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--horizon", type=int, default=30)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="compare machine- and process-level curves")
    s.add_argument("--compare", nargs=2, required=True, metavar=("MACHINE_CSV", "PROCESS_CSV"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", help="simulate, ingest, featurize, train, evaluate and report")
    s.add_argument("--config", help="pipeline JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (overrides config out_dir)")
    s.add_argument("--repetitions", type=int)
    s.add_argument("--resume", action="store_true", help="reuse stage outputs stamped with the same config")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ProcsightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
