"""Scikit-learn style classifier that learns a sequence of tasks.

Each ``partial_fit`` call teaches the model one task of previously unseen
classes. The first task is plain batch training. From the second task on,
the estimator runs a per-task hyperparameter search: every trial clones the
previous model, expands its head for the new classes, draws a candidate
(learning rate, regularization weight, exemplars per class), trains on the
new data plus the exemplar replay buffer, and is pruned early when its
validation loss falls behind the other trials. The winning trial's model
is committed together with its exemplar selection, and (depending on the
strategy) a teacher snapshot or curvature estimate is kept for the next
task.

Validation data is held out inside the estimator: a fixed number of rows
per class is split off every incoming task and accumulated into a
class-balanced pool, and the mean cross-entropy over that pool is the
objective every trial is scored by.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import (
    ConfigurationError,
    NumericFailureError,
    StateError,
    ValidationError,
)
from .hpo import (
    HyperConfig,
    SearchDimension,
    SearchSpace,
    TrialLedger,
    sh_prune_decision,
    sh_rungs,
    suggest,
)
from .memory import (
    SELECTORS,
    ExemplarMemory,
    herding_select,
    random_select,
    update_memory,
)
from .network import OptimizerState, expand_head, features, forward, init_model
from .seeding import derive_seed, spawn_rng
from .strategies import (
    STRATEGIES,
    LossSpec,
    estimate_fisher,
    exemplar_means,
    nme_predict,
    snapshot_teacher,
    wa_align,
)
from .stream import TaskDataset, ValidationPool, accumulate_validation, split_validation
from .training import train_epoch, validation_loss

_LOG = logging.getLogger(__name__)

TUNABLE_NAMES = ("eta", "lambda", "m")
EVAL_MODES = ("auto", "softmax", "nme")


class ContinualClassifier(ClassifierMixin, BaseEstimator):
    """Class-incremental classifier with per-task hyperparameter search.

    Args:
        strategy: forgetting mitigation, one of "none", "ewc", "lwf",
            "icarl", "wa".
        hidden_sizes: hidden layer widths; empty for a linear model.
        activation: hidden nonlinearity, "relu" or "tanh".
        epochs: maximum training epochs per trial.
        batch_size: minibatch size for SGD.
        eta: learning rate used when "eta" is not tuned.
        reg_weight: regularization weight used when "lambda" is not tuned.
        memory_per_class: exemplars stored per class when "m" is not tuned;
            0 disables replay.
        selector: exemplar selector, "herding" or "random".
        tune: subset of ("eta", "lambda", "m") searched per task; empty
            means every task trains once at the fixed values.
        n_trials: search budget per task when ``tune`` is non-empty.
        eta_space: (low, high) of the log-uniform learning-rate dimension.
        reg_space: (low, high) of the log-uniform regularization dimension.
        m_space: integer (low, high) of the exemplars-per-class dimension.
        min_resource: epochs before the first pruning checkpoint.
        reduction: halving rate; roughly 1/reduction of the trials survive
            each checkpoint, and checkpoints sit at min_resource times
            powers of reduction.
        validation_per_class: rows per class held out of every task into
            the pool that scores trials.
        memory_cap: hard upper bound on stored exemplars per class.
        temperature: distillation softening for the teacher-matching
            strategies.
        momentum: SGD momentum.
        weight_decay: SGD L2 shrink factor.
        fisher_sample_count: examples used for the curvature estimate.
        eval_mode: "softmax", "nme" (nearest exemplar mean), or "auto"
            (nme for strategy "icarl" once every class has exemplars).
        retrain_best: retrain the winning configuration from the previous
            model for the full epoch budget instead of reusing the winning
            trial's weights.
        workers: trial-level thread parallelism; 1 is fully reproducible.
        log_dir: directory receiving trials.jsonl; None keeps trial
            records in memory only.
        seed: master seed; every random choice derives from it.
    """

    def __init__(
        self,
        strategy="none",
        hidden_sizes=(64,),
        activation="relu",
        epochs=100,
        batch_size=32,
        eta=0.05,
        reg_weight=1.0,
        memory_per_class=0,
        selector="herding",
        tune=(),
        n_trials=25,
        eta_space=(1e-3, 1.0),
        reg_space=(1e-2, 1e4),
        m_space=(1, 50),
        min_resource=1,
        reduction=3,
        validation_per_class=10,
        memory_cap=50,
        temperature=2.0,
        momentum=0.9,
        weight_decay=0.0,
        fisher_sample_count=1024,
        eval_mode="auto",
        retrain_best=False,
        workers=1,
        log_dir=None,
        seed=0,
    ):
        self.strategy = strategy
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.eta = eta
        self.reg_weight = reg_weight
        self.memory_per_class = memory_per_class
        self.selector = selector
        self.tune = tune
        self.n_trials = n_trials
        self.eta_space = eta_space
        self.reg_space = reg_space
        self.m_space = m_space
        self.min_resource = min_resource
        self.reduction = reduction
        self.validation_per_class = validation_per_class
        self.memory_cap = memory_cap
        self.temperature = temperature
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.fisher_sample_count = fisher_sample_count
        self.eval_mode = eval_mode
        self.retrain_best = retrain_best
        self.workers = workers
        self.log_dir = log_dir
        self.seed = seed

    # ------------------------------------------------------------------
    # scikit-learn interface

    def fit(self, X, y):
        """Forget all state and learn ``(X, y)`` as the first task."""
        self._reset()
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        """Learn one task; labels must be disjoint from earlier tasks."""
        self._validate_params()
        if not hasattr(self, "model_"):
            self._reset()
        task_id = len(self.task_ids_) + 1
        task = TaskDataset(task_id=task_id, features=X, labels=y)
        if self.model_ is not None and task.feature_dim != self.n_features_in_:
            raise ValidationError(
                f"task {task_id} has {task.feature_dim} features, "
                f"the model expects {self.n_features_in_}"
            )
        overlap = set(task.class_set) & set(int(c) for c in self.classes_)
        if overlap:
            raise ValidationError(f"classes {sorted(overlap)} were already learned")

        train, held = split_validation(task, self.validation_per_class, self.seed)
        accumulate_validation(self.pool_, held)
        self._check_memory_budget(task_id, train)

        if self.model_ is None:
            self._fit_first_task(train)
        else:
            self._fit_searched_task(task_id, train)

        self.task_ids_.append(task_id)
        self.classes_ = np.sort(
            np.concatenate([self.classes_, np.array(task.class_set, dtype=np.int64)])
        )
        return self

    def predict(self, X):
        """Predicted labels under the resolved evaluation mode."""
        self._require_fitted()
        X = self._as_input(X)
        if self._resolve_eval_mode() == "nme":
            means = exemplar_means(self.model_, self.memory_.class_examples())
            return nme_predict(self.model_, X, means)
        logits = forward(self.model_, X)
        labels = np.asarray(self.model_.class_labels, dtype=np.int64)
        return labels[np.argmax(logits, axis=1)]

    def predict_proba(self, X):
        """Softmax probabilities with columns ordered like ``classes_``."""
        self._require_fitted()
        X = self._as_input(X)
        logits = forward(self.model_, X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        index = self.model_.label_index()
        columns = [index[int(c)] for c in self.classes_]
        return probs[:, columns]

    # ------------------------------------------------------------------
    # per-task pipeline

    def _fit_first_task(self, train: TaskDataset):
        """Plain batch training; no search and nothing to regularize yet."""
        eta = self._first_task_eta()
        labels = list(train.class_set)
        sizes = [train.feature_dim, *self.hidden_sizes, len(labels)]
        model = init_model(sizes, self.activation, seed=self.seed, class_labels=labels)
        opt = OptimizerState(
            learning_rate=eta, momentum=self.momentum, weight_decay=self.weight_decay
        )
        rng = spawn_rng("train", derive_seed("trial", self.seed, 1, 0))
        spec = LossSpec()
        for _ in range(self.epochs):
            train_epoch(model, opt, train.features, train.labels, spec, self.batch_size, rng)
        self.model_ = model
        self.n_features_in_ = train.feature_dim
        pool_X, pool_y = self.pool_.as_arrays()
        self.objectives_[1] = validation_loss(model, pool_X, pool_y)
        m_first = 0 if self._tuned("m") else int(self.memory_per_class)
        self.chosen_[1] = HyperConfig(eta=eta, lam=0.0, m=m_first)
        if self._tuned("m"):
            self._pending_first_ = train
        else:
            self._commit_memory(train, self.model_, m_first)
        self._after_commit(train)
        _LOG.info("task 1: eta=%.4g, plain training", eta)

    def _fit_searched_task(self, task_id: int, train: TaskDataset):
        teacher = snapshot_teacher(
            self.model_, fisher=self.fisher_ if self.strategy == "ewc" else None
        )
        new_labels = list(train.class_set)
        space, fixed = self._space_and_fixed()
        ledger = TrialLedger(task=task_id, path=self._ledger_path())
        self.ledgers_[task_id] = ledger
        pool_X, pool_y = self.pool_.as_arrays()
        replay = self.memory_.replay_arrays() if self.memory_.entries else None

        best_state = {"final": np.inf, "id": -1, "model": None}
        lock = threading.Lock()
        suggest_rng = spawn_rng("suggest", self.seed, task_id)
        budget = self.n_trials if space is not None else 1

        def run_trial():
            with lock:
                if space is None:
                    config = HyperConfig(
                        eta=float(fixed["eta"]),
                        lam=float(fixed["lambda"]),
                        m=int(fixed["m"]),
                    )
                else:
                    config = suggest(space, ledger, suggest_rng, fixed=fixed)
                trial_seed = derive_seed("trial", self.seed, task_id, len(ledger.records))
                record = ledger.new_trial(config, seed=trial_seed)
            started = time.monotonic()
            model, loss = self._train_candidate(
                teacher, train, replay, config, trial_seed, pool_X, pool_y,
                on_rung=lambda epoch, vloss: self._rung_gate(
                    lock, ledger, record, epoch, vloss, prune=space is not None
                ),
            )
            elapsed_ms = (time.monotonic() - started) * 1000.0
            with lock:
                if model is None:
                    if record.status == "running":
                        ledger.record_result(record, "pruned", duration_ms=elapsed_ms)
                    return
                ledger.record_result(
                    record, "completed", final=loss, duration_ms=elapsed_ms
                )
                if (loss, record.trial_id) < (best_state["final"], best_state["id"]):
                    best_state.update(final=loss, id=record.trial_id, model=model)

        try:
            if self.workers > 1:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    for future in [pool.submit(run_trial) for _ in range(budget)]:
                        future.result()
            else:
                for _ in range(budget):
                    run_trial()
        finally:
            ledger.close()

        best = ledger.best_trial()
        if best_state["id"] != best.trial_id:
            raise StateError("trial bookkeeping diverged from the ledger")
        model = best_state["model"]
        if self.retrain_best:
            retrain_seed = derive_seed("retrain", self.seed, task_id)
            model, _ = self._train_candidate(
                teacher, train, replay, best.config, retrain_seed,
                pool_X, pool_y, on_rung=None,
            )
            if model is None:
                raise NumericFailureError(
                    "retraining the winning configuration diverged"
                )

        self.model_ = model
        if self.strategy == "wa":
            n_old = len(teacher.model.class_labels)
            n_all = len(self.model_.class_labels)
            self.model_ = wa_align(self.model_, range(n_old), range(n_old, n_all))
        self.chosen_[task_id] = best.config
        self.objectives_[task_id] = best.final
        if self._pending_first_ is not None:
            self._commit_memory(self._pending_first_, teacher.model, best.config.m)
            self.chosen_[1] = replace(self.chosen_[1], m=best.config.m)
            self._pending_first_ = None
            self._pending_orders_ = {}
        m_star = best.config.m if self._tuned("m") else int(self.memory_per_class)
        self._commit_memory(train, self.model_, m_star)
        self._after_commit(train)
        finished = ledger.finished()
        _LOG.info(
            "task %d: eta=%.4g lambda=%.4g m=%d objective=%.4f (%d trials, %d pruned)",
            task_id, best.config.eta, best.config.lam, best.config.m, best.final,
            len(finished), sum(1 for r in finished if r.status == "pruned"),
        )

    def _train_candidate(
        self, teacher, train, replay, config, trial_seed, pool_X, pool_y, on_rung
    ):
        """Train one candidate model; returns (model, final validation loss).

        Returns (None, None) when the candidate diverges numerically or the
        ``on_rung`` callback stops it early.
        """
        model = expand_head(teacher.model, list(train.class_set), seed=trial_seed)
        opt = OptimizerState(
            learning_rate=config.eta, momentum=self.momentum, weight_decay=self.weight_decay
        )
        spec = LossSpec(
            strategy=self.strategy,
            reg_weight=config.lam,
            snapshot=teacher if self.strategy != "none" else None,
            temperature=self.temperature,
        )
        parts_X, parts_y = [train.features], [train.labels]
        if replay is not None:
            parts_X.append(replay[0])
            parts_y.append(replay[1])
        if self._pending_first_ is not None:
            first_X, first_y = self._pending_replay(config.m)
            if len(first_y):
                parts_X.append(first_X)
                parts_y.append(first_y)
        data_X = np.concatenate(parts_X)
        data_y = np.concatenate(parts_y)

        rng = spawn_rng("train", trial_seed)
        rungs = set(sh_rungs(self.min_resource, self.reduction, self.epochs))
        loss = None
        try:
            for epoch in range(1, self.epochs + 1):
                train_epoch(model, opt, data_X, data_y, spec, self.batch_size, rng)
                if epoch in rungs or epoch == self.epochs:
                    loss = validation_loss(model, pool_X, pool_y)
                    if on_rung is not None and not on_rung(epoch, loss):
                        return None, None
        except NumericFailureError as exc:
            _LOG.debug("candidate %s diverged: %s", config, exc)
            return None, None
        return model, loss

    def _rung_gate(self, lock, ledger, record, epoch, vloss, prune):
        """Record a checkpoint; returns False when the trial must stop."""
        rungs = set(sh_rungs(self.min_resource, self.reduction, self.epochs))
        with lock:
            if epoch in rungs:
                ledger.record_rung(record, epoch, vloss)
            if (
                prune
                and epoch < self.epochs
                and sh_prune_decision(ledger, record, epoch, vloss, self.reduction)
            ):
                ledger.record_result(record, "pruned")
                return False
        return True

    # ------------------------------------------------------------------
    # commit helpers

    def _commit_memory(self, task: TaskDataset, model, m: int):
        if m > 0:
            update_memory(self.memory_, task, model, m, self.selector, seed=self.seed)

    def _after_commit(self, train: TaskDataset):
        if self.strategy == "ewc":
            self.fisher_ = estimate_fisher(
                self.model_, train.features, train.labels, self.fisher_sample_count
            )

    def _pending_replay(self, m: int):
        """Exemplar rows for the deferred first task at a candidate m."""
        task = self._pending_first_
        rows_X, rows_y = [], []
        for label in task.class_set:
            rows = task.class_rows(label)
            if self.selector == "herding":
                idx = self._pending_orders_[label][:m]
            else:
                idx = random_select(
                    len(rows), m, derive_seed("sel", self.seed, task.task_id, label)
                )
            rows_X.append(rows[idx])
            rows_y.append(np.full(len(idx), label, dtype=np.int64))
        return np.concatenate(rows_X), np.concatenate(rows_y)

    # ------------------------------------------------------------------
    # configuration plumbing

    def _reset(self):
        self.model_ = None
        self.classes_ = np.empty(0, dtype=np.int64)
        self.task_ids_ = []
        self.pool_ = ValidationPool(per_class_count=self.validation_per_class)
        self.memory_ = ExemplarMemory(per_class_cap=self.memory_cap)
        self.fisher_ = None
        self.ledgers_ = {}
        self.chosen_ = {}
        self.objectives_ = {}
        self._pending_first_ = None
        self._pending_orders_ = {}
        path = self._ledger_path()
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.unlink(missing_ok=True)

    def _validate_params(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}"
            )
        if self.selector not in SELECTORS:
            raise ConfigurationError(
                f"unknown selector {self.selector!r}, expected one of {SELECTORS}"
            )
        if self.eval_mode not in EVAL_MODES:
            raise ConfigurationError(
                f"unknown eval_mode {self.eval_mode!r}, expected one of {EVAL_MODES}"
            )
        bad = [name for name in self.tune if name not in TUNABLE_NAMES]
        if bad:
            raise ConfigurationError(
                f"unknown tune dimensions {bad}, expected a subset of {TUNABLE_NAMES}"
            )
        if len(set(self.tune)) != len(tuple(self.tune)):
            raise ConfigurationError("tune lists a dimension twice")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.n_trials < 1:
            raise ConfigurationError("n_trials must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if not self._tuned("m") and not 0 <= int(self.memory_per_class) <= self.memory_cap:
            raise ConfigurationError(
                f"memory_per_class={self.memory_per_class} outside [0, {self.memory_cap}]"
            )

    def _space_and_fixed(self):
        dims = []
        if self._tuned("eta"):
            dims.append(SearchDimension("eta", "loguniform", *self.eta_space))
        if self._tuned("lambda"):
            dims.append(SearchDimension("lambda", "loguniform", *self.reg_space))
        if self._tuned("m"):
            dims.append(SearchDimension("m", "int", *self.m_space))
        fixed = {}
        if not self._tuned("eta"):
            fixed["eta"] = float(self.eta)
        if not self._tuned("lambda"):
            fixed["lambda"] = float(self.reg_weight)
        if not self._tuned("m"):
            fixed["m"] = int(self.memory_per_class)
        space = SearchSpace(tuple(dims)) if dims else None
        return space, fixed

    def _tuned(self, name: str) -> bool:
        return name in tuple(self.tune)

    def _first_task_eta(self) -> float:
        if not self._tuned("eta"):
            return float(self.eta)
        dim = SearchDimension("eta", "loguniform", *self.eta_space)
        lo, hi = dim.internal_bounds()
        return dim.from_internal((lo + hi) / 2.0)

    def _check_memory_budget(self, task_id: int, train: TaskDataset):
        """Fail fast when the memory settings cannot be honored later."""
        if self._tuned("m"):
            m_high = int(self.m_space[1])
            if m_high > self.memory_cap:
                raise ConfigurationError(
                    f"m_space high {m_high} exceeds memory_cap {self.memory_cap}"
                )
            needed = m_high
        else:
            needed = int(self.memory_per_class)
        if needed == 0:
            return
        smallest = min(len(train.class_rows(label)) for label in train.class_set)
        if needed > smallest:
            raise ConfigurationError(
                f"task {task_id}: storing {needed} exemplars per class needs more "
                f"than the {smallest} training rows of its smallest class"
            )
        if self._pending_first_ is not None and self.selector == "herding":
            pending = self._pending_first_
            for label in pending.class_set:
                rows = pending.class_rows(label)
                self._pending_orders_[label] = herding_select(
                    features(self.model_, rows), min(needed, len(rows))
                )

    def _ledger_path(self):
        if self.log_dir is None:
            return None
        return Path(self.log_dir) / "trials.jsonl"

    def _resolve_eval_mode(self) -> str:
        if self.eval_mode == "softmax":
            return "softmax"
        covered = set(label for _, label in self.memory_.entries)
        wanted = set(int(c) for c in self.classes_)
        if self.eval_mode == "nme":
            if not covered >= wanted:
                raise StateError(f"no exemplars for classes {sorted(wanted - covered)}")
            return "nme"
        if self.strategy == "icarl" and covered and covered >= wanted:
            return "nme"
        return "softmax"

    def _require_fitted(self):
        if not hasattr(self, "model_") or self.model_ is None:
            raise StateError("the classifier has not been fitted yet")

    def _as_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"expected shape (n, {self.n_features_in_}), got {X.shape}"
            )
        return X
