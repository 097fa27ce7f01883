"""Small input-validation helpers shared by every module.

All numeric work happens in float64; these helpers coerce and check once at
the public boundaries so the numerical code can assume clean inputs.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionMismatch, LabelOutOfRange

__all__ = ["as_vector", "as_matrix", "as_labels", "check_same_length"]


def as_vector(x, name: str = "x") -> np.ndarray:
    """Coerce to a finite 1-D float64 array with at least one entry."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size < 1:
        raise DimensionMismatch(f"{name} must have dimension >= 1")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_labels(labels, num_classes: int, name: str = "labels") -> np.ndarray:
    """Coerce to 1-D int64 labels, each within [0, num_classes)."""
    arr = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        bad = arr[(arr < 0) | (arr >= num_classes)][0]
        raise LabelOutOfRange(
            f"{name} contains {bad}, outside [0, {num_classes})"
        )
    return arr


def check_same_length(a, b, name_a: str, name_b: str) -> None:
    if len(a) != len(b):
        raise DimensionMismatch(
            f"{name_a} has length {len(a)} but {name_b} has length {len(b)}"
        )
