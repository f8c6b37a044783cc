"""Shared helpers for the experiment scripts."""

import argparse
import logging

from procsight.campaign import CampaignConfig, generate_dataset
from procsight.evaluation import ExperimentConfig, repeat_experiment
from procsight.features import COMPLETE, EVENT_ONLY, encode_complete, encode_event_only, encode_machine
from procsight.rnn import TrainConfig

ENCODERS = {
    "machine": lambda ds: [encode_machine(s) for s in ds.machine_series],
    COMPLETE: lambda ds: [encode_complete(a) for a in ds.activities],
    EVENT_ONLY: lambda ds: [encode_event_only(a) for a in ds.activities],
}


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="master seeds")
    p.add_argument("--repetitions", type=int, default=10, help="train/test runs averaged per seed")
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--hidden", type=int, default=TrainConfig.hidden_width)
    p.add_argument("--cell", choices=("lstm", "gru"), default="lstm")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")


def experiment(args) -> ExperimentConfig:
    train = TrainConfig(epochs=args.epochs, hidden_width=args.hidden, cell=args.cell)
    return ExperimentConfig(train=train, horizon=args.horizon, train_horizon=args.horizon,
                            train_prefixes=tuple(range(1, args.horizon + 1)))


def mean_curve(args, level: str, seed: int, noise: bool = True) -> list:
    ds = generate_dataset(CampaignConfig(seed=seed, background_noise=noise))
    return repeat_experiment(ENCODERS[level](ds), experiment(args), n=args.repetitions, master_seed=seed).mean
