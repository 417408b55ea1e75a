"""Accuracy-matrix metrics.

The accuracy matrix is lower-triangular: row t holds the test accuracy on
every task seen so far, measured right after learning task t, so row t has
exactly t entries and all values are percentages.
"""

from __future__ import annotations

import numpy as np

from .errors import MetricUndefinedError, ShapeError, ValidationError


def _validated_rows(matrix) -> list[np.ndarray]:
    rows = [np.asarray(row, dtype=np.float64) for row in matrix]
    if not rows:
        raise ValidationError("the accuracy matrix has no rows")
    for i, row in enumerate(rows):
        if row.ndim != 1 or len(row) != i + 1:
            raise ShapeError(
                f"row {i + 1} must have {i + 1} entries, got shape {row.shape}"
            )
        if not np.all(np.isfinite(row)):
            raise ValidationError(f"row {i + 1} contains non-finite entries")
        if np.any(row < 0.0) or np.any(row > 100.0):
            raise ValidationError(f"row {i + 1} has entries outside [0, 100]")
    return rows


def acc(matrix) -> float:
    """Average accuracy: the mean of the final row, in percent."""
    rows = _validated_rows(matrix)
    return float(np.mean(rows[-1]))


def bwt(matrix) -> float:
    """Backward transfer: how much old-task accuracy moved since learning.

    The mean over earlier tasks of (final accuracy minus the accuracy the
    task had right after it was learned). Negative values mean forgetting.

    Raises:
        MetricUndefinedError: fewer than two tasks.
    """
    rows = _validated_rows(matrix)
    T = len(rows)
    if T < 2:
        raise MetricUndefinedError("backward transfer needs at least two tasks")
    final = rows[-1]
    deltas = [final[i] - rows[i][i] for i in range(T - 1)]
    return float(np.mean(deltas))


def mean_std(values) -> tuple[float, float | None]:
    """Mean and sample standard deviation; std is None for a single value."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("cannot aggregate zero values")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("cannot aggregate non-finite values")
    if arr.size == 1:
        return float(arr[0]), None
    return float(arr.mean()), float(arr.std(ddof=1))
