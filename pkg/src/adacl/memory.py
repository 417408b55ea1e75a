"""Exemplar memory: per-task, per-class stored inputs for replay.

Each task may store up to a capped number of exemplars per class, chosen
either by greedy herding in the current model's feature space or uniformly
at random. A task's chosen size is never revised afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, StateError, ValidationError
from .network import ModelState, features
from .seeding import derive_seed, spawn_rng
from .stream import TaskDataset

SELECTORS = ("herding", "random")
DEFAULT_PER_CLASS_CAP = 50


@dataclass
class ExemplarMemory:
    """Stored exemplars keyed by (task_id, class label)."""

    per_class_cap: int = DEFAULT_PER_CLASS_CAP
    entries: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    sizes: dict[int, int] = field(default_factory=dict)
    selectors: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.per_class_cap < 0:
            raise ConfigurationError("per_class_cap must be >= 0")

    @property
    def tasks(self) -> list[int]:
        return sorted(self.sizes)

    def replay_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored exemplars stacked as (X, y), ordered by (task, label)."""
        if not self.entries:
            raise StateError("memory is empty")
        xs, ys = [], []
        for task_id, label in sorted(self.entries):
            rows = self.entries[(task_id, label)]
            xs.append(rows)
            ys.append(np.full(len(rows), label, dtype=np.int64))
        return np.vstack(xs), np.concatenate(ys)

    def class_examples(self) -> dict[int, np.ndarray]:
        """Stored rows grouped by class label (labels are task-unique)."""
        return {label: rows for (_, label), rows in sorted(self.entries.items())}

    def manifest(self) -> list[dict]:
        return [
            {
                "task_id": task_id,
                "class": label,
                "count": len(rows),
                "selector": self.selectors[task_id],
            }
            for (task_id, label), rows in sorted(self.entries.items())
        ]


def herding_select(feats: np.ndarray, k: int) -> np.ndarray:
    """Greedy mean-matching selection; returns indices in pick order.

    At each step the candidate whose inclusion brings the running mean of
    selected feature vectors closest (L2) to the full mean is added; ties
    go to the lowest index.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ValidationError("features must be 2-D")
    n = len(feats)
    if not 0 <= k <= n:
        raise ValidationError(f"k={k} outside [0, {n}]")
    target = feats.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(feats.shape[1])
    mask = np.ones(n, dtype=bool)
    for step in range(1, k + 1):
        available = np.flatnonzero(mask)
        cand_means = (running + feats[available]) / step
        dists = np.linalg.norm(cand_means - target, axis=1)
        pick = int(available[np.argmin(dists)])
        chosen.append(pick)
        running += feats[pick]
        mask[pick] = False
    return np.array(chosen, dtype=np.intp)


def random_select(n_pool: int, k: int, seed: int) -> np.ndarray:
    """Uniform selection of k distinct indices out of n_pool."""
    if not 0 <= k <= n_pool:
        raise ValidationError(f"k={k} outside [0, {n_pool}]")
    rng = spawn_rng("random-select", seed)
    return np.sort(rng.choice(n_pool, size=k, replace=False)).astype(np.intp)


def update_memory(
    memory: ExemplarMemory,
    task: TaskDataset,
    model: ModelState,
    m: int,
    selector: str,
    seed: int = 0,
) -> ExemplarMemory:
    """Store m exemplars per class of ``task`` (mutates and returns).

    Re-running with the same arguments replaces the task's entries with the
    same selection, so the operation is idempotent. ``m = 0`` leaves the
    memory untouched.

    Raises:
        ValidationError: m exceeds the per-class cap or a class's example
            count.
        ConfigurationError: unknown selector.
    """
    if selector not in SELECTORS:
        raise ConfigurationError(f"unknown selector {selector!r}, expected {SELECTORS}")
    m = int(m)
    if m < 0:
        raise ValidationError("m must be >= 0")
    if m > memory.per_class_cap:
        raise ValidationError(f"m={m} exceeds the per-class cap {memory.per_class_cap}")
    if m == 0:
        return memory
    for label in task.class_set:
        rows = task.class_rows(label)
        if m > len(rows):
            raise ValidationError(
                f"class {label} has {len(rows)} examples, cannot store {m}"
            )
        if selector == "herding":
            idx = herding_select(features(model, rows), m)
        else:
            idx = random_select(len(rows), m, derive_seed("sel", seed, task.task_id, label))
        memory.entries[(task.task_id, int(label))] = rows[idx].copy()
    memory.sizes[task.task_id] = m
    memory.selectors[task.task_id] = selector
    return memory


def memory_total(memory: ExemplarMemory) -> int:
    """Total number of stored exemplars across all tasks and classes."""
    return sum(len(rows) for rows in memory.entries.values())


def write_manifest(memory: ExemplarMemory, path: str | Path) -> None:
    """Write the memory manifest as stable, timestamp-free JSON."""
    doc = {
        "entries": memory.manifest(),
        "per_class_cap": memory.per_class_cap,
        "total": memory_total(memory),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
