"""Command-line entry point.

Four subcommands: ``run`` executes an experiment from a JSON config,
``baseline`` does the same but insists on fixed mode, ``hpo-bench`` prints
a sampler-vs-random benchmark table, and ``report`` regenerates plots and
aggregates from an existing output directory.

Exit codes: 0 on success, 1 for configuration problems (bad flags, bad
config files, missing inputs), 2 for runtime failures (numeric trouble,
inconsistent state, unexpected I/O errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

from .errors import (
    ConfigurationError,
    NumericFailureError,
    StateError,
    ValidationError,
)
from .experiment import ExperimentConfig, run_experiment, run_fixed_baseline
from .hpo import HyperConfig, SearchDimension, SearchSpace, TrialLedger, suggest
from .report import regenerate_report
from .seeding import spawn_rng

_LOG = logging.getLogger(__name__)

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class _UsageError(Exception):
    """Raised instead of argparse's SystemExit so main can return 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="adacl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--log-level", choices=sorted(_LOG_LEVELS),
                       help="overrides the ADACL_LOG environment variable")

    for name, text in (
        ("run", "run an experiment from a JSON config"),
        ("baseline", "run a fixed-hyperparameter experiment"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="path to the experiment JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="replace the config's seed list with this one seed")
        p.add_argument("--workers", type=int, default=1,
                       help="trial-level parallelism; 1 is reproducible")
        common(p)

    p = sub.add_parser("hpo-bench", help="compare the sampler against random search")
    p.add_argument("--trials", type=int, default=50, help="suggestions per run")
    p.add_argument("--repeats", type=int, default=20, help="paired repetitions")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    common(p)

    p = sub.add_parser("report", help="regenerate plots and aggregates")
    p.add_argument("--out", required=True, help="existing output directory")
    common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        _configure_logging(args.log_level)
        handler = {
            "run": _cmd_run,
            "baseline": _cmd_baseline,
            "hpo-bench": _cmd_hpo_bench,
            "report": _cmd_report,
        }[args.command]
        return handler(args)
    except (ConfigurationError, ValidationError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        _LOG.error("%s", exc)
        return 1
    except (NumericFailureError, StateError) as exc:
        _LOG.error("%s", exc)
        return 2
    except OSError as exc:
        _LOG.error("unexpected I/O failure: %s", exc)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


def _configure_logging(flag_value: str | None) -> None:
    name = flag_value or os.environ.get("ADACL_LOG", "warn")
    if name not in _LOG_LEVELS:
        raise ConfigurationError(
            f"unknown log level {name!r}, expected one of {sorted(_LOG_LEVELS)}"
        )
    logging.basicConfig(
        level=_LOG_LEVELS[name],
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as handle:
        doc = json.load(handle)
    return ExperimentConfig.from_dict(doc)


def _cmd_run(args) -> int:
    config = _overridden(_load_config(args.config), args)
    bundle = run_experiment(config, out_dir=args.out, workers=args.workers)
    _print_summary(bundle, args.out)
    return 0


def _cmd_baseline(args) -> int:
    config = _overridden(_load_config(args.config), args)
    bundle = run_fixed_baseline(config, out_dir=args.out, workers=args.workers)
    _print_summary(bundle, args.out)
    return 0


def _overridden(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        config = dataclasses.replace(config, seeds=(args.seed,))
    return config


def _print_summary(bundle, out) -> None:
    agg = bundle.aggregates()
    print(_format_metric("ACC", agg["acc"]))
    if agg["bwt"] is None:
        print("BWT n/a (needs at least two tasks)")
    else:
        print(_format_metric("BWT", agg["bwt"]))
    print(f"results written to {Path(out)}")


def _format_metric(name: str, entry: dict) -> str:
    if entry["std"] is None:
        return f"{name} {entry['mean']:.2f}"
    return f"{name} {entry['mean']:.2f} +/- {entry['std']:.2f}"


def _cmd_report(args) -> int:
    doc = regenerate_report(args.out)
    print(f"regenerated plots and aggregates for {len(doc['per_seed'])} seed(s) "
          f"in {Path(args.out)}")
    return 0


# ----------------------------------------------------------------------
# sampler benchmark

_BENCH_SPACE = SearchSpace((
    SearchDimension("eta", "uniform", 0.0, 1.0),
    SearchDimension("lambda", "loguniform", 1.0, 1000.0),
    SearchDimension("m", "int", 0, 50),
))
_BENCH_TARGET = (0.3, 30.0, 17)


def _bench_objective(config: HyperConfig) -> float:
    """Squared distance to a fixed target, each dimension normalized."""
    d_eta = config.eta - _BENCH_TARGET[0]
    d_lam = (math.log(config.lam) - math.log(_BENCH_TARGET[1])) / math.log(1000.0)
    d_m = (config.m - _BENCH_TARGET[2]) / 50.0
    return d_eta ** 2 + d_lam ** 2 + d_m ** 2


def _cmd_hpo_bench(args) -> int:
    if args.trials < 1 or args.repeats < 1:
        raise ConfigurationError("--trials and --repeats must be >= 1")
    print(f"{'seed':>4}  {'sampler-best':>12}  {'random-best':>12}  winner")
    wins, margins = 0, []
    for rep in range(args.repeats):
        tpe_best = _bench_tpe(args.seed, rep, args.trials)
        rand_best = _bench_random(args.seed, rep, args.trials)
        margin = rand_best - tpe_best
        wins += tpe_best <= rand_best
        margins.append(margin)
        winner = "sampler" if tpe_best <= rand_best else "random"
        print(f"{rep:>4}  {tpe_best:>12.6f}  {rand_best:>12.6f}  {winner}")
    print(
        f"sampler wins {wins}/{args.repeats} "
        f"(mean margin {sum(margins) / len(margins):+.4f})"
    )
    return 0


def _bench_tpe(seed: int, rep: int, trials: int) -> float:
    rng = spawn_rng("hpo-bench", seed, rep, "tpe")
    ledger = TrialLedger(task=1)
    best = math.inf
    for _ in range(trials):
        config = suggest(_BENCH_SPACE, ledger, rng)
        value = _bench_objective(config)
        record = ledger.new_trial(config, seed=0)
        ledger.record_result(record, "completed", final=value)
        best = min(best, value)
    return best


def _bench_random(seed: int, rep: int, trials: int) -> float:
    rng = spawn_rng("hpo-bench", seed, rep, "rand")
    best = math.inf
    for _ in range(trials):
        config = HyperConfig(
            eta=_BENCH_SPACE.dims[0].prior_sample(rng),
            lam=_BENCH_SPACE.dims[1].prior_sample(rng),
            m=_BENCH_SPACE.dims[2].prior_sample(rng),
        )
        best = min(best, _bench_objective(config))
    return best


if __name__ == "__main__":
    entrypoint()
