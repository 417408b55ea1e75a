"""Epoch-level training, accuracy evaluation, and the gradient checker."""

from __future__ import annotations

import numpy as np

from .errors import (
    ConfigurationError,
    NumericFailureError,
    ValidationError,
)
from .network import (
    ModelState,
    OptimizerState,
    _check_input,
    forward,
    sgd_step,
)
from .strategies import (
    LossSpec,
    composite_loss,
    composite_loss_and_grads,
    nme_predict,
)


def train_epoch(
    model: ModelState,
    opt: OptimizerState,
    X: np.ndarray,
    y: np.ndarray,
    spec: LossSpec,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """One shuffled pass over the data; returns the mean per-batch loss.

    The model and optimizer state are updated in place. The final short
    batch (if any) is trained like the rest.

    Raises:
        NumericFailureError: a batch produced a non-finite loss or update;
            the message names the batch index.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    X = _check_input(model, X)
    y = np.asarray(y)
    if len(X) != len(y):
        raise ValidationError(f"{len(X)} rows vs {len(y)} labels")
    perm = rng.permutation(len(X))
    losses = []
    for b, start in enumerate(range(0, len(X), batch_size)):
        idx = perm[start : start + batch_size]
        loss, grads = composite_loss_and_grads(model, X[idx], y[idx], spec)
        if not np.isfinite(loss):
            raise NumericFailureError(f"non-finite loss in batch {b}")
        sgd_step(model, grads, opt)
        for layer in model.layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise NumericFailureError(f"non-finite parameters after batch {b}")
        losses.append(loss)
    return float(np.mean(losses))


def evaluate_accuracy(
    model: ModelState,
    X: np.ndarray,
    y: np.ndarray,
    mode: str = "softmax",
    class_means: dict[int, np.ndarray] | None = None,
) -> float:
    """Top-1 accuracy in percent.

    ``mode`` is "softmax" (argmax over head logits) or "nme" (nearest
    normalized exemplar mean, which requires ``class_means`` covering every
    label in ``y``).
    """
    X = _check_input(model, X)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    if len(X) != len(y):
        raise ValidationError(f"{len(X)} rows vs {len(y)} labels")
    if mode == "softmax":
        known = set(model.class_labels)
        missing = sorted(set(y.tolist()) - known)
        if missing:
            raise ValidationError(f"labels not in the model's head: {missing}")
        labels = np.asarray(model.class_labels, dtype=np.int64)
        pred = labels[np.argmax(forward(model, X), axis=1)]
    elif mode == "nme":
        if not class_means:
            raise ValidationError("nme mode needs class_means")
        missing = sorted(set(y.tolist()) - set(class_means))
        if missing:
            raise ValidationError(f"labels without exemplar means: {missing}")
        pred = nme_predict(model, X, class_means)
    else:
        raise ConfigurationError(f"unknown evaluation mode {mode!r}")
    return float((pred == y).mean() * 100.0)


def validation_loss(model: ModelState, X: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy on held-out data (the trial selection objective)."""
    loss = composite_loss(model, X, y, LossSpec(strategy="none"))
    if not np.isfinite(loss):
        raise NumericFailureError("validation loss is non-finite")
    return loss


def _param_arrays(model: ModelState):
    for layer in model.layers:
        yield layer.weight
        yield layer.bias


def grad_check(
    model: ModelState,
    X: np.ndarray,
    y: np.ndarray,
    spec: LossSpec,
    eps: float = 1e-5,
    n_coords: int = 150,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``n_coords`` randomly chosen parameter coordinates (all of them
    when the model is smaller). The relative error denominator is floored
    at 1e-3 so that coordinates with near-zero gradient are compared on an
    absolute scale instead of amplifying finite-difference truncation
    noise. Only meaningful where the loss is differentiable; with relu
    hidden units the caller must keep preactivations away from the kink.
    """
    work = model.clone()
    _, grads = composite_loss_and_grads(work, X, y, spec)
    flat_grads = np.concatenate(
        [g.ravel() for gw_gb in grads for g in gw_gb]
    )
    sizes = [arr.size for arr in _param_arrays(work)]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    count = min(n_coords, total)
    coords = rng.choice(total, size=count, replace=False)

    arrays = list(_param_arrays(work))
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in coords:
        a = int(np.searchsorted(bounds, flat, side="right") - 1)
        offset = int(flat - bounds[a])
        target = arrays[a]
        orig = target.flat[offset]
        target.flat[offset] = orig + eps
        up = composite_loss(work, X, y, spec)
        target.flat[offset] = orig - eps
        down = composite_loss(work, X, y, spec)
        target.flat[offset] = orig
        numeric = (up - down) / (2.0 * eps)
        analytic = flat_grads[flat]
        denom = max(abs(analytic), abs(numeric), 1e-3)
        worst = max(worst, abs(analytic - numeric) / denom)
    return float(worst)
