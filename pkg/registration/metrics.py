"""
Evaluation measures: Dice overlap, mask propagation, Jacobian determinants,
fold percentage and Pearson correlation.
"""
import logging
from typing import Sequence

import numpy as np
from scipy import stats

from .autodiff import no_grad
from .diffeo import warp
from .exceptions import DegenerateStatisticError, ShapeError

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5


def dice(a, b) -> float:
    """2|a ∩ b| / (|a| + |b|); two empty masks score 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"Cannot compare masks of shapes {a.shape} and {b.shape}.")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def warp_mask(mask, displacement) -> np.ndarray:
    """Propagate a binary mask through a deformation; interpolated values >= 0.5 are inside."""
    mask = np.asarray(mask, dtype=np.float64)
    with no_grad():
        warped = warp(mask, np.asarray(displacement, dtype=np.float64)).data
    return (warped >= MASK_THRESHOLD).astype(np.uint8)


def _difference(array: np.ndarray, axis: int) -> np.ndarray:
    """Forward difference along `axis`, backward difference at the last index."""
    if array.shape[axis] < 2:
        return np.zeros_like(array)
    forward = np.diff(array, axis=axis)
    last = np.take(forward, [-1], axis=axis)
    return np.concatenate([forward, last], axis=axis)


def jacobian_det(displacement) -> np.ndarray:
    """
    Per-voxel determinant of the Jacobian of p -> p + u(p).

    Args:
        displacement (np.ndarray): Field of shape `(D, *S)`.

    Returns:
        np.ndarray: Determinants of shape S.
    """
    field = np.asarray(displacement, dtype=np.float64)
    dims = field.shape[0]
    if field.ndim != dims + 1:
        raise ShapeError(f"A {dims}-component field needs {dims} spatial axes, got shape {field.shape}.")
    jacobian = np.empty(field.shape[1:] + (dims, dims), dtype=np.float64)
    for d in range(dims):
        for e in range(dims):
            jacobian[..., d, e] = _difference(field[d], e) + (1.0 if d == e else 0.0)
    return np.linalg.det(jacobian)


def fold_percentage(displacement) -> float:
    """Percentage of voxels whose Jacobian determinant is strictly negative."""
    det = jacobian_det(displacement)
    return 100.0 * np.count_nonzero(det < 0) / det.size


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Sample Pearson correlation.

    Raises:
        DegenerateStatisticError: For mismatched lengths, fewer than two samples
            or a constant series.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateStatisticError(f"Pearson needs two 1-D series of equal length, got {x.shape} and {y.shape}.")
    if x.size < 2:
        raise DegenerateStatisticError("Pearson correlation needs at least two samples.")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateStatisticError("Pearson correlation is undefined for a constant series.")
    return float(stats.pearsonr(x, y)[0])
