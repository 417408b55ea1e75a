"""Experiment orchestration: a configured stream in, per-seed results out.

An experiment runs one method (strategy plus hyperparameter mode) over a
task stream for one or more seeds. Test rows are held out of every task up
front; the estimator then carves its own validation pool from what remains,
so the three splits never overlap. After each task the full accuracy row
over all seen tasks is measured on the test splits.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .estimator import ContinualClassifier
from .hpo import HyperConfig
from .memory import DEFAULT_PER_CLASS_CAP, SELECTORS, memory_total, write_manifest
from .metrics import acc, bwt, mean_std
from .seeding import derive_seed
from .strategies import DEFAULT_TEMPERATURE, STRATEGIES
from .stream import StreamSpec, TaskDataset, generate_stream, load_stream_file, split_validation

_LOG = logging.getLogger(__name__)

MODES = ("adaptive", "fixed")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Exactly one of ``stream`` (generation settings) and ``stream_file``
    (a CSV path) must be set. In adaptive mode at least one tune flag must
    be on; in fixed mode all must be off, and the per-task values come from
    the fixed fields or the two schedules.
    """

    strategy: str
    mode: str
    stream: dict | None = None
    stream_file: str | None = None
    tune_eta: bool = False
    tune_lambda: bool = False
    tune_m: bool = False
    eta: float = 0.05
    reg_weight: float = 1.0
    memory_per_class: int = 0
    lambda_schedule: bool = False
    memory_budget: int | None = None
    selector: str = "herding"
    epochs: int = 100
    configs: int = 25
    validation_per_class: int = 10
    test_per_class: int = 10
    seeds: tuple[int, ...] = (0,)
    eval_mode: str = "auto"
    hidden_sizes: tuple[int, ...] = (64,)
    activation: str = "relu"
    batch_size: int = 32
    eta_space: tuple[float, float] = (1e-3, 1.0)
    reg_space: tuple[float, float] = (1e-2, 1e4)
    m_space: tuple[int, int] = (1, 50)
    memory_cap: int = DEFAULT_PER_CLASS_CAP
    temperature: float = DEFAULT_TEMPERATURE
    min_resource: int = 1
    reduction: int = 3
    retrain_best: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}"
            )
        if self.mode not in MODES:
            raise ConfigurationError(
                f"unknown mode {self.mode!r}, expected one of {MODES}"
            )
        if self.selector not in SELECTORS:
            raise ConfigurationError(
                f"unknown selector {self.selector!r}, expected one of {SELECTORS}"
            )
        flags = (self.tune_eta, self.tune_lambda, self.tune_m)
        if self.mode == "adaptive" and not any(flags):
            raise ConfigurationError("adaptive mode needs at least one tune flag")
        if self.mode == "fixed" and any(flags):
            raise ConfigurationError("fixed mode does not accept tune flags")
        if self.mode == "adaptive" and (self.lambda_schedule or self.memory_budget is not None):
            raise ConfigurationError("schedules are only available in fixed mode")
        if (self.stream is None) == (self.stream_file is None):
            raise ConfigurationError("set exactly one of stream and stream_file")
        if self.stream is not None:
            StreamSpec(**self.stream)  # fail fast on bad generation settings
        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds contains duplicates")
        if self.memory_budget is not None and self.memory_budget < 0:
            raise ConfigurationError("memory_budget must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        """Build a config from a parsed JSON document, rejecting unknown keys."""
        if not isinstance(doc, dict):
            raise ConfigurationError("the configuration must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {unknown}")
        kwargs = dict(doc)
        for name in ("seeds", "hidden_sizes", "eta_space", "reg_space", "m_space"):
            if name in kwargs and isinstance(kwargs[name], list):
                kwargs[name] = tuple(kwargs[name])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        """JSON-ready form; tuples become lists."""
        doc = dataclasses.asdict(self)
        for name, value in doc.items():
            if isinstance(value, tuple):
                doc[name] = list(value)
        return doc

    def tune_names(self) -> tuple[str, ...]:
        names = []
        if self.tune_eta:
            names.append("eta")
        if self.tune_lambda:
            names.append("lambda")
        if self.tune_m:
            names.append("m")
        return tuple(names)


@dataclass(frozen=True)
class TaskOutcome:
    """What one task's training committed, snapshot at task end."""

    task_id: int
    config: HyperConfig
    objective: float
    accuracy_row: tuple[float, ...]
    memory_total: int


@dataclass(frozen=True)
class SeedResult:
    """One seed's complete run."""

    seed: int
    matrix: tuple[tuple[float, ...], ...]
    outcomes: tuple[TaskOutcome, ...]
    acc: float
    bwt: float | None


@dataclass(frozen=True)
class ResultsBundle:
    """All seeds of one experiment plus the config that produced them."""

    config: ExperimentConfig
    per_seed: tuple[SeedResult, ...]

    def aggregates(self) -> dict:
        acc_mean, acc_std = mean_std([s.acc for s in self.per_seed])
        out = {"acc": {"mean": acc_mean, "std": acc_std}}
        bwts = [s.bwt for s in self.per_seed]
        if all(b is None for b in bwts):
            out["bwt"] = None
        else:
            bwt_mean, bwt_std = mean_std(bwts)
            out["bwt"] = {"mean": bwt_mean, "std": bwt_std}
        return out


def constancy_schedules(kind: str, t: int, c: int = 10, total: int = 0):
    """Pre-defined per-task values used by the fixed baselines.

    The "lambda" schedule weighs regularization by how much has already
    been learned, t*c / (t*c + c); the "m" schedule divides a fixed total
    memory budget evenly over the tasks seen so far, floor(total / t).

    Raises:
        ConfigurationError: unknown kind or out-of-range arguments.
    """
    if t < 1:
        raise ConfigurationError("t must be >= 1")
    if kind == "lambda":
        if c < 1:
            raise ConfigurationError("c must be >= 1")
        return (t * c) / ((t * c) + c)
    if kind == "m":
        if total < 0:
            raise ConfigurationError("total must be >= 0")
        return total // t
    raise ConfigurationError(f"unknown schedule kind {kind!r}")


def load_stream(config: ExperimentConfig) -> list[TaskDataset]:
    """The experiment's task stream, generated or read from file."""
    if config.stream is not None:
        return generate_stream(StreamSpec(**config.stream))
    return load_stream_file(config.stream_file)


def run_experiment(
    config: ExperimentConfig, out_dir: str | Path | None = None, workers: int = 1
) -> ResultsBundle:
    """Run every seed of the experiment; optionally persist results.

    With ``out_dir`` set, writes results.json, per-seed directories with
    results.json / trials.jsonl / memory.json, SVG plots, and a
    run_meta.json sidecar holding wall-clock facts that never enter
    results.json, so reruns of the same config are byte-identical.
    """
    started = time.monotonic()
    started_at = datetime.datetime.now(datetime.timezone.utc)
    tasks = load_stream(config)
    out_path = Path(out_dir) if out_dir is not None else None
    results = []
    for seed in config.seeds:
        seed_dir = out_path / f"seed_{seed}" if out_path is not None else None
        results.append(_run_seed(config, tasks, seed, seed_dir, workers))
        _LOG.info(
            "seed %d: acc=%.2f bwt=%s", seed, results[-1].acc,
            "n/a" if results[-1].bwt is None else f"{results[-1].bwt:.2f}",
        )
    bundle = ResultsBundle(config=config, per_seed=tuple(results))
    if out_path is not None:
        from .report import render_plots, write_results

        write_results(bundle, out_path)
        render_plots(bundle, out_path)
        _write_run_meta(out_path, started_at, time.monotonic() - started, workers)
    return bundle


def run_fixed_baseline(
    config: ExperimentConfig, out_dir: str | Path | None = None, workers: int = 1
) -> ResultsBundle:
    """Run a fixed-hyperparameter experiment (no per-task search).

    Raises:
        ConfigurationError: the config is not in fixed mode.
    """
    if config.mode != "fixed":
        raise ConfigurationError("run_fixed_baseline needs a fixed-mode config")
    return run_experiment(config, out_dir=out_dir, workers=workers)


def _estimator(config: ExperimentConfig, seed: int, seed_dir, workers: int):
    return ContinualClassifier(
        strategy=config.strategy,
        hidden_sizes=tuple(config.hidden_sizes),
        activation=config.activation,
        epochs=config.epochs,
        batch_size=config.batch_size,
        eta=config.eta,
        reg_weight=config.reg_weight,
        memory_per_class=config.memory_per_class,
        selector=config.selector,
        tune=config.tune_names(),
        n_trials=config.configs,
        eta_space=tuple(config.eta_space),
        reg_space=tuple(config.reg_space),
        m_space=tuple(config.m_space),
        min_resource=config.min_resource,
        reduction=config.reduction,
        validation_per_class=config.validation_per_class,
        memory_cap=config.memory_cap,
        temperature=config.temperature,
        eval_mode=config.eval_mode,
        retrain_best=config.retrain_best,
        workers=workers,
        log_dir=seed_dir,
        seed=seed,
    )


def _run_seed(config, tasks, seed, seed_dir, workers) -> SeedResult:
    test_seed = derive_seed("test-split", seed)
    splits = [split_validation(task, config.test_per_class, test_seed) for task in tasks]
    est = _estimator(config, seed, seed_dir, workers)
    rows: list[tuple[float, ...]] = []
    outcomes: list[TaskOutcome] = []
    for t, (train, _) in enumerate(splits, start=1):
        if config.mode == "fixed":
            if config.lambda_schedule:
                est.set_params(reg_weight=constancy_schedules("lambda", t))
            if config.memory_budget is not None:
                est.set_params(
                    memory_per_class=int(constancy_schedules("m", t, total=config.memory_budget))
                )
        est.partial_fit(train.features, train.labels)
        row = tuple(_test_accuracy(est, splits[i][1]) for i in range(t))
        rows.append(row)
        outcomes.append(
            TaskOutcome(
                task_id=t,
                config=est.chosen_[t],
                objective=est.objectives_[t],
                accuracy_row=row,
                memory_total=memory_total(est.memory_),
            )
        )
    if seed_dir is not None:
        write_manifest(est.memory_, Path(seed_dir) / "memory.json")
    matrix = tuple(rows)
    return SeedResult(
        seed=seed,
        matrix=matrix,
        outcomes=tuple(outcomes),
        acc=acc(matrix),
        bwt=None if len(matrix) < 2 else bwt(matrix),
    )


def _test_accuracy(est, held: dict[int, np.ndarray]) -> float:
    labels = sorted(held)
    X = np.concatenate([held[label] for label in labels])
    y = np.concatenate([np.full(len(held[label]), label, dtype=np.int64) for label in labels])
    return 100.0 * float(np.mean(est.predict(X) == y))


def _write_run_meta(out_path: Path, started_at, duration_seconds: float, workers: int):
    meta = {
        "started_at": started_at.isoformat(),
        "duration_seconds": round(duration_seconds, 3),
        "workers": workers,
        "deterministic": workers == 1,
    }
    if workers > 1:
        meta["notice"] = (
            "trial scheduling used multiple workers; suggestion order and "
            "therefore results may differ between runs"
        )
    text = json.dumps(meta, indent=2, sort_keys=True) + "\n"
    (out_path / "run_meta.json").write_text(text, encoding="utf-8")
