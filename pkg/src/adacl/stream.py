"""Synthetic class-incremental task streams and their on-disk format.

A stream is an ordered list of tasks. Each task carries feature vectors for
a set of class labels disjoint from every other task's, so the learner only
ever sees a label once. Streams are either generated (gaussian blobs or
concentric rings, with per-task difficulty knobs) or loaded from CSV.
"""

from __future__ import annotations

import csv
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    ShapeError,
    StreamFormatError,
    ValidationError,
)
from .seeding import spawn_rng

GENERATOR_KINDS = ("gaussian-blobs", "rings")


@dataclass
class TaskDataset:
    """One task's labelled examples.

    Attributes:
        task_id: 1-based position of the task in the stream.
        features: float64 array of shape (n, d).
        labels: int64 array of shape (n,).
    """

    task_id: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1:
            raise ShapeError(f"labels must be 1-D, got shape {self.labels.shape}")
        if len(self.features) != len(self.labels):
            raise ShapeError(
                f"{len(self.features)} feature rows vs {len(self.labels)} labels"
            )
        if len(self.features) == 0:
            raise ValidationError(f"task {self.task_id} has no examples")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError(f"task {self.task_id} contains non-finite features")
        if self.task_id < 1:
            raise ValidationError(f"task_id must be positive, got {self.task_id}")

    @property
    def num_examples(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_set(self) -> tuple[int, ...]:
        return tuple(sorted(int(c) for c in np.unique(self.labels)))

    def class_rows(self, label: int) -> np.ndarray:
        """Return the feature rows of one class, in stored order."""
        return self.features[self.labels == label]


@dataclass
class StreamSpec:
    """Recipe for a generated stream.

    ``class_separation`` and ``noise`` accept either a scalar (applied to
    every task) or one value per task; together they set task difficulty.
    For blobs, separation is the minimum inter-class mean distance; for
    rings it is the radial gap between consecutive rings.
    """

    kind: str
    num_tasks: int
    classes_per_task: int
    samples_per_class: int
    feature_dim: int
    class_separation: float | Sequence[float] = 6.0
    noise: float | Sequence[float] = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigurationError(
                f"unknown stream kind {self.kind!r}, expected one of {GENERATOR_KINDS}"
            )
        for name in ("num_tasks", "classes_per_task", "samples_per_class", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.kind == "rings" and self.feature_dim < 2:
            raise ConfigurationError("rings streams need feature_dim >= 2")
        self.class_separation = self._per_task(self.class_separation, "class_separation")
        self.noise = self._per_task(self.noise, "noise")
        if any(s <= 0 for s in self.class_separation):
            raise ConfigurationError("class_separation values must be positive")
        if any(s <= 0 for s in self.noise):
            raise ConfigurationError("noise values must be positive")

    def _per_task(self, value, name: str) -> tuple[float, ...]:
        if np.isscalar(value):
            return (float(value),) * self.num_tasks
        values = tuple(float(v) for v in value)
        if len(values) != self.num_tasks:
            raise ConfigurationError(
                f"{name} needs one value per task ({self.num_tasks}), got {len(values)}"
            )
        return values


def task_labels(spec: StreamSpec, task_id: int) -> list[int]:
    """Global labels assigned to one task (consecutive, disjoint blocks)."""
    base = (task_id - 1) * spec.classes_per_task
    return list(range(base, base + spec.classes_per_task))


def generate_stream(spec: StreamSpec) -> list[TaskDataset]:
    """Generate a stream deterministically from its spec.

    The same spec always yields bitwise-identical arrays; task data depends
    only on (spec.seed, task index), not on experiment run seeds.
    """
    tasks = []
    for t in range(1, spec.num_tasks + 1):
        rng = spawn_rng("stream", spec.seed, "task", t)
        labels = task_labels(spec, t)
        separation = spec.class_separation[t - 1]
        noise = spec.noise[t - 1]
        if spec.kind == "gaussian-blobs":
            features, rows = _blob_task(rng, spec, labels, separation, noise)
        else:
            features, rows = _ring_task(rng, spec, labels, separation, noise)
        tasks.append(TaskDataset(task_id=t, features=features, labels=rows))
    return tasks


def _blob_task(rng, spec, labels, separation, noise):
    c, m, d = spec.classes_per_task, spec.samples_per_class, spec.feature_dim
    means = rng.normal(size=(c, d))
    if c > 1:
        # Rescale so the closest pair of means sits exactly `separation` apart.
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs**2).sum(axis=2))
        min_dist = dist[np.triu_indices(c, k=1)].min()
        means *= separation / min_dist
    blocks, block_labels = [], []
    for k, label in enumerate(labels):
        blocks.append(means[k] + noise * rng.normal(size=(m, d)))
        block_labels.append(np.full(m, label, dtype=np.int64))
    return np.vstack(blocks), np.concatenate(block_labels)


def _ring_task(rng, spec, labels, separation, noise):
    c, m, d = spec.classes_per_task, spec.samples_per_class, spec.feature_dim
    blocks, block_labels = [], []
    for k, label in enumerate(labels):
        radius = separation * (k + 1)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
        radial = radius + noise * rng.normal(size=m)
        x = np.zeros((m, d))
        x[:, 0] = radial * np.cos(theta)
        x[:, 1] = radial * np.sin(theta)
        if d > 2:
            x[:, 2:] = noise * rng.normal(size=(m, d - 2))
        blocks.append(x)
        block_labels.append(np.full(m, label, dtype=np.int64))
    return np.vstack(blocks), np.concatenate(block_labels)


# ---------------------------------------------------------------------------
# CSV stream files: header "task_id,label,f_1,...,f_d", one example per row.
# ---------------------------------------------------------------------------


def write_stream_file(stream: Sequence[TaskDataset], path: str | Path) -> None:
    """Write a stream to CSV; floats are written so they round-trip exactly."""
    if not stream:
        raise ValidationError("cannot write an empty stream")
    d = stream[0].feature_dim
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "label"] + [f"f_{i + 1}" for i in range(d)])
        for task in stream:
            if task.feature_dim != d:
                raise ShapeError("tasks in one stream must share a feature dimension")
            for x, y in zip(task.features, task.labels):
                writer.writerow([int(task.task_id), int(y)] + [repr(float(v)) for v in x])


def load_stream_file(path: str | Path) -> list[TaskDataset]:
    """Load a stream from CSV, validating format and cross-task invariants.

    Raises:
        FileNotFoundError: the path does not exist.
        StreamFormatError: malformed header or row (carries the line number).
        ValidationError: class sets overlap across tasks, or no data rows.
    """
    path = Path(path)
    with path.open("r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StreamFormatError("empty file", line=1) from None
        if len(header) < 3 or header[:2] != ["task_id", "label"]:
            raise StreamFormatError(
                "header must be task_id,label,f_1,...,f_d", line=1
            )
        d = len(header) - 2
        if header[2:] != [f"f_{i + 1}" for i in range(d)]:
            raise StreamFormatError("feature columns must be named f_1..f_d", line=1)

        by_task: dict[int, list[tuple[int, list[float]]]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise StreamFormatError(
                    f"expected {d + 2} fields, got {len(row)}", line=line_no
                )
            try:
                task_id, label = int(row[0]), int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise StreamFormatError(str(exc), line=line_no) from None
            by_task.setdefault(task_id, []).append((label, values))

    if not by_task:
        raise StreamFormatError("file contains a header but no examples", line=2)

    tasks = []
    for task_id in sorted(by_task):
        rows = by_task[task_id]
        features = np.array([v for _, v in rows], dtype=np.float64)
        labels = np.array([lbl for lbl, _ in rows], dtype=np.int64)
        tasks.append(TaskDataset(task_id=task_id, features=features, labels=labels))

    seen: dict[int, int] = {}
    for task in tasks:
        for label in task.class_set:
            if label in seen:
                raise ValidationError(
                    f"class {label} appears in tasks {seen[label]} and {task.task_id}"
                )
            seen[label] = task.task_id
    return tasks


# ---------------------------------------------------------------------------
# Validation pool: class-balanced held-out examples accumulated across tasks.
# ---------------------------------------------------------------------------


@dataclass
class ValidationPool:
    """Held-out examples, exactly ``per_class_count`` per seen class."""

    per_class_count: int
    held: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.per_class_count < 1:
            raise ConfigurationError("per_class_count must be >= 1")

    @property
    def class_labels(self) -> list[int]:
        return sorted(self.held)

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.held.values())

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack the pool into (X, y), ordered by class label."""
        if not self.held:
            raise ValidationError("validation pool is empty")
        xs, ys = [], []
        for label in self.class_labels:
            xs.append(self.held[label])
            ys.append(np.full(len(self.held[label]), label, dtype=np.int64))
        return np.vstack(xs), np.concatenate(ys)


def split_validation(
    task: TaskDataset, per_class: int, seed: int
) -> tuple[TaskDataset, dict[int, np.ndarray]]:
    """Split per-class held-out rows off a task.

    Returns the training remainder (original row order preserved) and a
    mapping label -> held-out feature rows. The held-out choice depends only
    on (seed, label), so reruns are reproducible.

    Raises:
        ValidationError: some class has too few examples to leave a
            non-empty training remainder.
    """
    if per_class < 1:
        raise ConfigurationError("per_class must be >= 1")
    held: dict[int, np.ndarray] = {}
    held_mask = np.zeros(task.num_examples, dtype=bool)
    for label in task.class_set:
        idx = np.flatnonzero(task.labels == label)
        if len(idx) <= per_class:
            raise ValidationError(
                f"class {label} has {len(idx)} examples, needs more than {per_class}"
            )
        rng = spawn_rng("val-split", seed, "class", label)
        pick = np.sort(rng.choice(len(idx), size=per_class, replace=False))
        held[label] = task.features[idx[pick]].copy()
        held_mask[idx[pick]] = True
    remainder = TaskDataset(
        task_id=task.task_id,
        features=task.features[~held_mask],
        labels=task.labels[~held_mask],
    )
    return remainder, held


def accumulate_validation(
    pool: ValidationPool, heldout: Mapping[int, np.ndarray]
) -> ValidationPool:
    """Fold one task's held-out examples into the pool (mutates and returns).

    Raises:
        ValidationError: a class is already pooled, or a class arrives with
            the wrong number of rows.
        ShapeError: feature dimension differs from what the pool holds.
    """
    if not heldout:
        raise ValidationError("heldout mapping is empty")
    dim = None
    if pool.held:
        dim = next(iter(pool.held.values())).shape[1]
    for label in sorted(heldout):
        rows = np.asarray(heldout[label], dtype=np.float64)
        if rows.ndim != 2:
            raise ShapeError(f"held-out rows for class {label} must be 2-D")
        if len(rows) != pool.per_class_count:
            raise ValidationError(
                f"class {label}: expected {pool.per_class_count} held-out rows, "
                f"got {len(rows)}"
            )
        if dim is not None and rows.shape[1] != dim:
            raise ShapeError(
                f"class {label}: feature dim {rows.shape[1]} != pool dim {dim}"
            )
        if int(label) in pool.held:
            raise ValidationError(f"class {label} is already in the pool")
        pool.held[int(label)] = rows
        dim = rows.shape[1]
    return pool
