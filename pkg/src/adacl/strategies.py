"""The composite training loss and its strategy-specific regularizers.

Every strategy trains the same objective shape: cross-entropy on the batch
plus a weighted regularizer. "none" has no regularizer; "ewc" anchors
parameters to the previous task's values with a diagonal-Fisher quadratic;
"lwf", "icarl" and "wa" distill temperature-softened old-class logits
against a frozen teacher copy of the previous model (they differ in how
models are evaluated or post-processed, which lives elsewhere).

Gradients here are exact. `composite_loss_and_grads` is the single code
path used both by training and by the finite-difference gradient checker.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    NumericFailureError,
    ShapeError,
    ValidationError,
)
from .network import (
    ACTIVATIONS,
    ModelState,
    _backprop_from,
    _check_input,
    _forward_cached,
    features,
    forward,
    log_softmax,
    softmax,
)
from .seeding import content_digest

STRATEGIES = ("none", "ewc", "lwf", "icarl", "wa")
KD_STRATEGIES = ("lwf", "icarl", "wa")
DEFAULT_TEMPERATURE = 2.0


@dataclass
class FisherDiagonal:
    """Per-parameter curvature estimates, shaped like a model's layers."""

    diagonals: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        for fw, fb in self.diagonals:
            if (fw < 0).any() or (fb < 0).any():
                raise ValidationError("Fisher diagonal entries must be >= 0")


@dataclass
class TeacherSnapshot:
    """Frozen copy of the previous task's model, plus its Fisher for ewc."""

    model: ModelState
    fisher: FisherDiagonal | None = None


def snapshot_teacher(model: ModelState, fisher: FisherDiagonal | None = None) -> TeacherSnapshot:
    if fisher is not None and len(fisher.diagonals) != len(model.layers):
        raise ShapeError("Fisher does not match the model's layer count")
    return TeacherSnapshot(model=model.clone(), fisher=fisher)


@dataclass(frozen=True)
class LossSpec:
    """Which composite loss a training step optimizes."""

    strategy: str = "none"
    reg_weight: float = 0.0
    snapshot: TeacherSnapshot | None = None
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}"
            )
        if self.reg_weight < 0:
            raise ConfigurationError("reg_weight must be >= 0")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")


def _label_indices(model: ModelState, y: np.ndarray) -> np.ndarray:
    index = model.label_index()
    try:
        return np.array([index[int(label)] for label in y], dtype=np.intp)
    except KeyError as exc:
        raise ValidationError(f"label {exc.args[0]} is not in the model's head") from None


def cross_entropy(model: ModelState, X: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of the model on a labelled batch."""
    X = _check_input(model, X)
    yidx = _label_indices(model, np.asarray(y))
    logp = log_softmax(forward(model, X))
    return float(-logp[np.arange(len(yidx)), yidx].mean())


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


def kd_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    temperature: float,
    old_indices: Sequence[int],
) -> float:
    """Mean KL divergence between softened teacher and student distributions.

    Only the columns in ``old_indices`` take part. The teacher may supply
    either full-width rows (sliced by the same indices) or rows already
    restricted to the old classes.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be > 0")
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    old = np.asarray(old_indices, dtype=np.intp)
    if old.size == 0:
        raise ValidationError("old_indices is empty")
    s = student_logits[:, old]
    if teacher_logits.shape[1] == student_logits.shape[1]:
        t = teacher_logits[:, old]
    elif teacher_logits.shape[1] == old.size:
        t = teacher_logits
    else:
        raise ShapeError(
            f"teacher logits have {teacher_logits.shape[1]} columns, expected "
            f"{student_logits.shape[1]} or {old.size}"
        )
    if s.shape[0] != t.shape[0]:
        raise ShapeError("student and teacher batches differ in length")
    value, _ = _kd_core(s, t, temperature)
    return value


def _kd_core(student_old: np.ndarray, teacher_old: np.ndarray, temperature: float):
    """KL(teacher || student) over softened logits; returns (value, dvalue/dstudent_old)."""
    p = softmax(teacher_old / temperature)
    logq = log_softmax(student_old / temperature)
    logp = log_softmax(teacher_old / temperature)
    n = student_old.shape[0]
    value = float((p * (logp - logq)).sum() / n)
    grad = (np.exp(logq) - p) / (temperature * n)
    return value, grad


# ---------------------------------------------------------------------------
# EWC
# ---------------------------------------------------------------------------


def _ewc_pairs(model: ModelState, snapshot: TeacherSnapshot):
    """Yield (fisher, current, anchor) triples over the shared coordinates.

    The snapshot is shaped like the previous-task model, so for the head
    only the old rows (a prefix, since expansion appends) are anchored.
    """
    if snapshot.fisher is None:
        raise ConfigurationError("ewc needs a snapshot that carries a Fisher estimate")
    teacher = snapshot.model
    if len(teacher.layers) != len(model.layers):
        raise ShapeError("snapshot layer count differs from the model")
    if model.class_labels[: teacher.num_classes] != teacher.class_labels:
        raise ValidationError("snapshot head labels are not a prefix of the model's")
    for i, (layer, anchor, (fw, fb)) in enumerate(
        zip(model.layers, teacher.layers, snapshot.fisher.diagonals)
    ):
        rows = anchor.weight.shape[0]
        if layer.weight.shape[1] != anchor.weight.shape[1] or rows > layer.weight.shape[0]:
            raise ShapeError(f"layer {i}: snapshot shape does not embed in the model")
        if fw.shape != anchor.weight.shape or fb.shape != anchor.bias.shape:
            raise ShapeError(f"layer {i}: Fisher shape does not match the snapshot")
        yield i, rows, fw, fb, layer, anchor


def ewc_penalty(model: ModelState, snapshot: TeacherSnapshot) -> float:
    """Sum of fisher * (theta - anchor)^2 over the shared coordinates."""
    total = 0.0
    for _, rows, fw, fb, layer, anchor in _ewc_pairs(model, snapshot):
        dw = layer.weight[:rows] - anchor.weight
        db = layer.bias[:rows] - anchor.bias
        total += float((fw * dw**2).sum() + (fb * db**2).sum())
    return total


def estimate_fisher(
    model: ModelState, X: np.ndarray, y: np.ndarray, sample_count: int = 1024
) -> FisherDiagonal:
    """Diagonal empirical Fisher: mean squared per-example log-likelihood gradient.

    Examples are canonically ordered by a content hash before averaging, so
    the estimate is invariant to input order; when more than
    ``sample_count`` examples are supplied, the first ``sample_count`` in
    that canonical order are used, which keeps the subsample stable too.
    """
    if sample_count < 1:
        raise ConfigurationError("sample_count must be >= 1")
    X = _check_input(model, X)
    y = np.asarray(y, dtype=np.int64)
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} rows vs {len(y)} labels")
    digests = [content_digest(X[i], y[i : i + 1]) for i in range(len(X))]
    order = np.argsort(digests)[:sample_count]
    X, y = X[order], y[order]
    yidx = _label_indices(model, y)

    logits, pres, acts = _forward_cached(model, X)
    delta = softmax(logits)
    delta[np.arange(len(yidx)), yidx] -= 1.0  # per-example grad, no 1/n
    n = len(X)
    dact = ACTIVATIONS[model.activation][1]
    diagonals: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        # (delta_i outer a_i)^2 == delta_i^2 outer a_i^2, so the mean of the
        # squared per-example weight gradient is exactly (delta^2)^T (a^2)/n.
        diagonals[i] = ((delta**2).T @ acts[i] ** 2 / n, (delta**2).mean(axis=0))
        if i > 0:
            delta = (delta @ model.layers[i].weight) * dact(pres[i - 1])
    return FisherDiagonal(diagonals=diagonals)


# ---------------------------------------------------------------------------
# Composite loss
# ---------------------------------------------------------------------------


def composite_loss(
    model: ModelState, X: np.ndarray, y: np.ndarray, spec: LossSpec
) -> float:
    """Cross-entropy plus the strategy's weighted regularizer."""
    loss, _ = _composite(model, X, y, spec, want_grads=False)
    return loss


def composite_loss_and_grads(
    model: ModelState, X: np.ndarray, y: np.ndarray, spec: LossSpec
):
    """Composite loss value and exact gradients for every parameter."""
    return _composite(model, X, y, spec, want_grads=True)


def _composite(model, X, y, spec: LossSpec, want_grads: bool):
    X = _check_input(model, X)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValidationError("batch is empty")
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} rows vs {len(y)} labels")
    yidx = _label_indices(model, y)
    n = len(X)

    logits, pres, acts = _forward_cached(model, X)
    logp = log_softmax(logits)
    ce = float(-logp[np.arange(n), yidx].mean())

    grad_logits = None
    if want_grads:
        grad_logits = softmax(logits)
        grad_logits[np.arange(n), yidx] -= 1.0
        grad_logits /= n

    reg = 0.0
    if spec.strategy in KD_STRATEGIES:
        snapshot = _require_snapshot(spec)
        teacher = snapshot.model
        index = model.label_index()
        missing = [l for l in teacher.class_labels if l not in index]
        if missing:
            raise ValidationError(f"teacher labels missing from the model: {missing}")
        old_idx = np.array([index[l] for l in teacher.class_labels], dtype=np.intp)
        teacher_logits = forward(teacher, X)
        reg, kd_grad = _kd_core(logits[:, old_idx], teacher_logits, spec.temperature)
        if want_grads:
            grad_logits[:, old_idx] += spec.reg_weight * kd_grad

    grads = None
    if want_grads:
        grads = _backprop_from(model, pres, acts, grad_logits)

    if spec.strategy == "ewc":
        snapshot = _require_snapshot(spec)
        reg = ewc_penalty(model, snapshot)
        if want_grads:
            for i, rows, fw, fb, layer, anchor in _ewc_pairs(model, snapshot):
                gw, gb = grads[i]
                gw[:rows] += 2.0 * spec.reg_weight * fw * (layer.weight[:rows] - anchor.weight)
                gb[:rows] += 2.0 * spec.reg_weight * fb * (layer.bias[:rows] - anchor.bias)

    return ce + spec.reg_weight * reg, grads


def _require_snapshot(spec: LossSpec) -> TeacherSnapshot:
    if spec.snapshot is None:
        raise ConfigurationError(f"strategy {spec.strategy!r} needs a teacher snapshot")
    return spec.snapshot


# ---------------------------------------------------------------------------
# Weight alignment and nearest-exemplar-mean classification
# ---------------------------------------------------------------------------


def wa_align(
    model: ModelState, old_indices: Sequence[int], new_indices: Sequence[int]
) -> ModelState:
    """Rescale new-class head rows to the old rows' mean weight norm.

    Returns a copy; biases and all other parameters are untouched, and old
    rows are bitwise identical to the input model's.
    """
    old = np.asarray(old_indices, dtype=np.intp)
    new = np.asarray(new_indices, dtype=np.intp)
    if old.size == 0 or new.size == 0:
        raise ValidationError("old and new index sets must be non-empty")
    if set(old.tolist()) & set(new.tolist()):
        raise ValidationError("old and new index sets overlap")
    head = model.layers[-1].weight
    if old.max() >= head.shape[0] or new.max() >= head.shape[0]:
        raise ShapeError("head row index out of range")
    old_norms = np.linalg.norm(head[old], axis=1)
    new_norms = np.linalg.norm(head[new], axis=1)
    if new_norms.mean() <= 1e-12:
        raise NumericFailureError("new-class weight norms are degenerate")
    gamma = float(old_norms.mean() / new_norms.mean())
    out = model.clone()
    out.layers[-1].weight[new] *= gamma
    return out


def exemplar_means(
    model: ModelState, class_examples: Mapping[int, np.ndarray]
) -> dict[int, np.ndarray]:
    """Normalized mean feature vector per class from stored exemplars."""
    means: dict[int, np.ndarray] = {}
    for label in sorted(class_examples):
        rows = np.asarray(class_examples[label], dtype=np.float64)
        if rows.ndim != 2 or len(rows) == 0:
            raise ValidationError(f"class {label}: exemplars must be a non-empty 2-D array")
        feats = features(model, rows)
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
        mu = feats.mean(axis=0)
        means[int(label)] = mu / max(float(np.linalg.norm(mu)), 1e-12)
    return means


def nme_classify(feature: np.ndarray, class_means: Mapping[int, np.ndarray]) -> int:
    """Label of the nearest class mean in feature space (ties: lowest label)."""
    if not class_means:
        raise ValidationError("class_means is empty")
    feature = np.asarray(feature, dtype=np.float64)
    feature = feature / max(float(np.linalg.norm(feature)), 1e-12)
    labels = sorted(class_means)
    stack = np.stack([class_means[l] for l in labels])
    dists = np.linalg.norm(stack - feature, axis=1)
    return int(labels[int(np.argmin(dists))])


def nme_predict(
    model: ModelState, X: np.ndarray, class_means: Mapping[int, np.ndarray]
) -> np.ndarray:
    """Vectorized nearest-exemplar-mean prediction for a batch."""
    if not class_means:
        raise ValidationError("class_means is empty")
    feats = features(model, X)
    feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    labels = np.array(sorted(class_means), dtype=np.int64)
    stack = np.stack([class_means[int(l)] for l in labels])
    d2 = ((feats[:, None, :] - stack[None, :, :]) ** 2).sum(axis=2)
    return labels[np.argmin(d2, axis=1)]
