"""Hyperparameter search: TPE suggestions, halving-based pruning, trial log.

The sampler is a multivariate tree-structured Parzen estimator. Finished
trials (completed or pruned) are split at the gamma quantile of their
objective into a good and a bad set; each set is modelled by a kernel
density over per-dimension truncated gaussians centered at the observed
values. Candidates are drawn jointly from the good model (pick an
observation, sample its product kernel) and the one maximizing the
good-to-bad density ratio wins. Until enough trials finish, dimensions are
sampled independently from their priors.

Pruning is asynchronous successive halving: at rung epochs (min_resource
times powers of the reduction factor) a trial survives only while its
objective sits within the best ceil(n/reduction) of all values recorded at
that rung so far, the trial's own included.
"""

from __future__ import annotations

import json
import math
import os
import threading
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .errors import ConfigurationError, StateError, ValidationError

N_STARTUP = 10
N_CANDIDATES = 24
GAMMA = 0.25
BANDWIDTH_FLOOR_FRACTION = 0.01

DIMENSION_NAMES = ("eta", "lambda", "m")
DIMENSION_KINDS = ("uniform", "loguniform", "int")

_normal = NormalDist()
_erf = np.vectorize(math.erf)


def _norm_cdf(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + _erf(np.asarray(z) / math.sqrt(2.0)))


@dataclass(frozen=True)
class SearchDimension:
    """One searched hyperparameter: kind, bounds, and its transforms.

    "uniform" and "loguniform" are real-valued (the latter modelled in log
    space); "int" covers an inclusive integer range, modelled continuously
    over [low - 0.5, high + 0.5] and rounded on the way out.
    """

    name: str
    kind: str
    low: float
    high: float

    def __post_init__(self):
        if self.name not in DIMENSION_NAMES:
            raise ConfigurationError(
                f"dimension name {self.name!r} must be one of {DIMENSION_NAMES}"
            )
        if self.kind not in DIMENSION_KINDS:
            raise ConfigurationError(
                f"dimension kind {self.kind!r} must be one of {DIMENSION_KINDS}"
            )
        if not (np.isfinite(self.low) and np.isfinite(self.high)):
            raise ConfigurationError(f"{self.name}: bounds must be finite")
        if self.low >= self.high:
            raise ConfigurationError(f"{self.name}: low must be < high")
        if self.kind == "loguniform" and self.low <= 0:
            raise ConfigurationError(f"{self.name}: loguniform bounds must be > 0")
        if self.kind == "int" and (
            self.low != int(self.low) or self.high != int(self.high)
        ):
            raise ConfigurationError(f"{self.name}: int bounds must be whole numbers")

    def to_internal(self, value: float) -> float:
        return math.log(value) if self.kind == "loguniform" else float(value)

    def from_internal(self, x: float) -> float | int:
        if self.kind == "loguniform":
            return float(np.clip(math.exp(x), self.low, self.high))
        if self.kind == "int":
            return int(np.clip(round(x), self.low, self.high))
        return float(np.clip(x, self.low, self.high))

    def internal_bounds(self) -> tuple[float, float]:
        if self.kind == "loguniform":
            return math.log(self.low), math.log(self.high)
        if self.kind == "int":
            return self.low - 0.5, self.high + 0.5
        return self.low, self.high

    def prior_sample(self, rng: np.random.Generator) -> float | int:
        lo, hi = self.internal_bounds()
        return self.from_internal(float(rng.uniform(lo, hi)))

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


@dataclass(frozen=True)
class SearchSpace:
    """The dimensions being searched (a non-empty subset of eta/lambda/m)."""

    dims: tuple[SearchDimension, ...]

    def __post_init__(self):
        if not self.dims:
            raise ConfigurationError("search space needs at least one dimension")
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate dimension names: {names}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    def __iter__(self):
        return iter(self.dims)


@dataclass(frozen=True)
class HyperConfig:
    """A complete hyperparameter assignment for one trial."""

    eta: float
    lam: float
    m: int

    def value(self, name: str) -> float | int:
        if name == "eta":
            return self.eta
        if name == "lambda":
            return self.lam
        if name == "m":
            return self.m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"eta": self.eta, "lambda": self.lam, "m": self.m}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "HyperConfig":
        return cls(eta=float(doc["eta"]), lam=float(doc["lambda"]), m=int(doc["m"]))


@dataclass
class RungRecord:
    epoch: int
    loss: float


@dataclass
class TrialRecord:
    """Full state of one trial; the log stores snapshots of this."""

    trial_id: int
    config: HyperConfig
    seed: int
    rungs: list[RungRecord] = field(default_factory=list)
    status: str = "running"
    final: float | None = None
    duration_ms: float | None = field(default=None, compare=False)

    def to_json_dict(self, task: int) -> dict:
        return {
            "task": task,
            "trial_id": self.trial_id,
            "config": self.config.to_dict(),
            "rungs": [{"epoch": r.epoch, "loss": r.loss} for r in self.rungs],
            "status": self.status,
            "final": self.final,
            "seed": self.seed,
            "duration_ms": None,  # wall-clock facts live in run_meta.json
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "TrialRecord":
        return cls(
            trial_id=int(doc["trial_id"]),
            config=HyperConfig.from_dict(doc["config"]),
            seed=int(doc["seed"]),
            rungs=[RungRecord(int(r["epoch"]), float(r["loss"])) for r in doc["rungs"]],
            status=str(doc["status"]),
            final=None if doc["final"] is None else float(doc["final"]),
        )


class TrialLedger:
    """Trial records for one task's search, persisted as appended JSON lines.

    Every mutation appends the trial's full current state as one line, so a
    partially written run can be reloaded by keeping the last line per
    trial id. Completion events are flushed and fsynced before returning.
    Mutators are serialized by an internal lock, so concurrent trial
    workers may share one ledger.
    """

    def __init__(self, task: int, path: str | Path | None = None):
        self.task = int(task)
        self.records: list[TrialRecord] = []
        self._lock = threading.RLock()
        self._path = Path(path) if path is not None else None
        self._fh = None
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self._path.open("a")

    # -- persistence -------------------------------------------------------

    def _write(self, record: TrialRecord, durable: bool = False) -> None:
        if self._fh is None:
            return
        line = json.dumps(record.to_json_dict(self.task), sort_keys=True)
        self._fh.write(line + "\n")
        self._fh.flush()
        if durable:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    @classmethod
    def load(cls, path: str | Path, task: int) -> "TrialLedger":
        """Rebuild a ledger from a log file (read-only: no file handle)."""
        ledger = cls(task)
        last: dict[int, TrialRecord] = {}
        with Path(path).open() as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                if int(doc["task"]) != task:
                    continue
                record = TrialRecord.from_json_dict(doc)
                last[record.trial_id] = record
        ledger.records = [last[i] for i in sorted(last)]
        return ledger

    # -- mutation ----------------------------------------------------------

    def new_trial(self, config: HyperConfig, seed: int) -> TrialRecord:
        with self._lock:
            record = TrialRecord(trial_id=len(self.records), config=config, seed=seed)
            self.records.append(record)
            self._write(record)
            return record

    def record_rung(self, trial: TrialRecord, epoch: int, loss: float) -> None:
        with self._lock:
            if trial.status != "running":
                raise StateError(f"trial {trial.trial_id} is {trial.status}")
            if not np.isfinite(loss):
                raise ValidationError("rung loss must be finite")
            if trial.rungs and epoch <= trial.rungs[-1].epoch:
                raise StateError("rung epochs must be strictly increasing")
            trial.rungs.append(RungRecord(int(epoch), float(loss)))
            self._write(trial)

    def record_result(
        self,
        trial: TrialRecord,
        status: str,
        final: float | None = None,
        duration_ms: float | None = None,
    ) -> None:
        """Finish a trial; the only legal transitions are running -> pruned
        and running -> completed (with a finite final objective)."""
        with self._lock:
            if trial.status != "running":
                raise StateError(f"trial {trial.trial_id} already {trial.status}")
            if status == "completed":
                if final is None or not np.isfinite(final):
                    raise ValidationError("completed trials need a finite final value")
                trial.final = float(final)
            elif status == "pruned":
                if final is not None:
                    raise ValidationError("pruned trials carry no final value")
            else:
                raise ValidationError(f"illegal terminal status {status!r}")
            trial.status = status
            trial.duration_ms = duration_ms
            self._write(trial, durable=True)

    # -- queries -----------------------------------------------------------

    def finished(self) -> list[TrialRecord]:
        with self._lock:
            return [r for r in self.records if r.status in ("completed", "pruned")]

    def best_trial(self) -> TrialRecord:
        """Completed trial with the lowest final objective (ties: lowest id)."""
        with self._lock:
            done = [r for r in self.records if r.status == "completed"]
        if not done:
            raise StateError("no completed trials")
        return min(done, key=lambda r: (r.final, r.trial_id))

    def rung_losses(self, epoch: int) -> dict[int, float]:
        """Last loss recorded at `epoch` per trial."""
        with self._lock:
            out = {}
            for r in self.records:
                for rung in r.rungs:
                    if rung.epoch == epoch:
                        out[r.trial_id] = rung.loss
            return out


# ---------------------------------------------------------------------------
# Successive halving
# ---------------------------------------------------------------------------


def sh_rungs(min_resource: int, reduction: int, max_epochs: int) -> list[int]:
    """Rung epochs: min_resource * reduction^j up to the epoch budget."""
    if min_resource < 1 or reduction < 2 or max_epochs < 1:
        raise ConfigurationError("need min_resource >= 1, reduction >= 2, max_epochs >= 1")
    rungs = []
    epoch = min_resource
    while epoch <= max_epochs:
        rungs.append(epoch)
        epoch *= reduction
    return rungs


def sh_prune_decision(
    ledger: TrialLedger,
    trial: TrialRecord,
    epoch: int,
    loss: float,
    reduction: int,
) -> bool:
    """True when the trial must be pruned at this rung.

    The comparison pool is every loss recorded at this rung so far across
    trials, with the given loss standing for the current trial. A trial
    survives while its loss is within the best ceil(n / reduction); ties at
    the cut survive. A pure function of the ledger state, so replaying a
    log reproduces the same decisions.
    """
    if reduction < 2:
        raise ConfigurationError("reduction must be >= 2")
    pool = ledger.rung_losses(epoch)
    pool[trial.trial_id] = loss
    losses = sorted(pool.values())
    keep = math.ceil(len(losses) / reduction)
    return loss > losses[keep - 1]


# ---------------------------------------------------------------------------
# TPE sampling
# ---------------------------------------------------------------------------


def _observations(space: SearchSpace, ledger: TrialLedger):
    """(internal value vector, objective) pairs for finished trials."""
    rows, objectives = [], []
    for record in ledger.finished():
        if record.status == "completed":
            objective = record.final
        elif record.rungs:
            objective = record.rungs[-1].loss
        else:
            continue  # failed before reaching any rung: no signal
        rows.append(
            [dim.to_internal(record.config.value(dim.name)) for dim in space]
        )
        objectives.append(objective)
    return np.array(rows, dtype=np.float64), np.array(objectives, dtype=np.float64)


def _bandwidths(space: SearchSpace, points: np.ndarray) -> np.ndarray:
    """Scott's rule per dimension with a floor of 1% of the modelled range.

    The spread and count come from the full pool of finished observations
    and one bandwidth serves both the good and the bad model: per-set
    bandwidths collapse once the good set concentrates, which freezes the
    search at the first local best instead of exploring.
    """
    n = len(points)
    widths = []
    for j, dim in enumerate(space):
        lo, hi = dim.internal_bounds()
        floor = BANDWIDTH_FLOOR_FRACTION * (hi - lo)
        scott = float(points[:, j].std()) * n ** (-0.2)
        widths.append(max(scott, floor))
    return np.array(widths)


def _log_density(
    space: SearchSpace, points: np.ndarray, widths: np.ndarray, x: np.ndarray
) -> float:
    """Log density of the mean-of-product-kernels model at internal point x."""
    per_obs = np.ones(len(points))
    for j, dim in enumerate(space):
        lo, hi = dim.internal_bounds()
        c = points[:, j]
        w = widths[j]
        norm = _norm_cdf((hi - c) / w) - _norm_cdf((lo - c) / w)
        norm = np.maximum(norm, 1e-300)
        if dim.kind == "int":
            v = round(x[j])
            mass = _norm_cdf((v + 0.5 - c) / w) - _norm_cdf((v - 0.5 - c) / w)
            per_obs *= mass / norm
        else:
            z = (x[j] - c) / w
            pdf = np.exp(-0.5 * z**2) / (math.sqrt(2.0 * math.pi) * w)
            per_obs *= pdf / norm
    return float(np.log(max(per_obs.mean(), 1e-300)))


def _sample_kernel(
    space: SearchSpace, center: np.ndarray, widths: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw one internal point from the product kernel at `center`."""
    out = np.empty(len(center))
    for j, dim in enumerate(space):
        lo, hi = dim.internal_bounds()
        w = widths[j]
        a = _normal.cdf((lo - center[j]) / w)
        b = _normal.cdf((hi - center[j]) / w)
        u = rng.uniform(a, b)
        # u cannot hit 0 or 1: a, b are strict bounds of an open interval
        out[j] = center[j] + w * _normal.inv_cdf(u)
    return out


def suggest(
    space: SearchSpace,
    ledger: TrialLedger,
    rng: np.random.Generator,
    fixed: Mapping[str, float] | None = None,
    n_startup: int = N_STARTUP,
    n_candidates: int = N_CANDIDATES,
    gamma: float = GAMMA,
) -> HyperConfig:
    """Propose the next trial's full hyperparameter assignment.

    Dimensions in ``space`` are sampled (prior draws until ``n_startup``
    trials have finished, TPE afterwards); any of eta/lambda/m not searched
    must be supplied through ``fixed``.
    """
    fixed = dict(fixed or {})
    missing = set(DIMENSION_NAMES) - set(space.names) - set(fixed)
    if missing:
        raise ConfigurationError(f"no value for dimensions: {sorted(missing)}")

    points, objectives = _observations(space, ledger)
    if len(points) < n_startup:
        values = {dim.name: dim.prior_sample(rng) for dim in space}
    else:
        order = np.argsort(objectives, kind="stable")
        n_good = math.ceil(gamma * len(points))
        good = points[order[:n_good]]
        bad = points[order[n_good:]]
        if len(bad) == 0:
            values = {dim.name: dim.prior_sample(rng) for dim in space}
        else:
            widths = _bandwidths(space, points)
            best_x, best_score = None, -np.inf
            for _ in range(n_candidates):
                center = good[rng.integers(len(good))]
                x = _sample_kernel(space, center, widths, rng)
                score = _log_density(space, good, widths, x) - _log_density(
                    space, bad, widths, x
                )
                if score > best_score:
                    best_x, best_score = x, score
            values = {
                dim.name: dim.from_internal(best_x[j]) for j, dim in enumerate(space)
            }

    merged = {**fixed, **values}
    return HyperConfig(
        eta=float(merged["eta"]), lam=float(merged["lambda"]), m=int(merged["m"])
    )
