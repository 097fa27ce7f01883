"""Differentiable normalize/scale/softmax building blocks.

These are the primitives the loss heads, trainer and evaluator compose.
All functions are pure and operate on float64 numpy arrays, so they are
safe to call concurrently.
"""

from __future__ import annotations

import numpy as np

from .exceptions import NearZeroNorm, NonPositiveAlpha
from .validation import as_vector, as_labels, check_same_length

# Norms at or below this are rejected rather than fabricating a direction.
EPS_NORM = 1e-12

__all__ = [
    "EPS_NORM",
    "l2_normalize",
    "scale",
    "l2_normalize_backward",
    "softmax_cross_entropy",
    "cosine_similarity",
    "log_softmax",
]


def l2_normalize(x) -> np.ndarray:
    """Project ``x`` onto the unit hypersphere: ``y = x / ||x||``.

    Raises
    ------
    NearZeroNorm
        If ``||x|| <= EPS_NORM``; a near-zero vector has no direction.
    """
    x = as_vector(x)
    norm = float(np.linalg.norm(x))
    if norm <= EPS_NORM:
        raise NearZeroNorm(f"norm {norm:.3e} <= {EPS_NORM:.0e}")
    return x / norm


def scale(y, alpha: float) -> np.ndarray:
    """Scale a vector by the hypersphere radius ``alpha`` (must be > 0)."""
    y = as_vector(y, name="y")
    if not alpha > 0:
        raise NonPositiveAlpha(f"alpha must be > 0, got {alpha}")
    return alpha * y


def l2_normalize_backward(x, grad_y) -> np.ndarray:
    """Pull a gradient back through ``y = x / ||x||``.

    The Jacobian is ``J = (I - y y^T) / ||x||``; it is symmetric and
    annihilates the radial direction, so only the tangential component of
    ``grad_y`` survives:

        grad_x = (grad_y - y (y . grad_y)) / ||x||
    """
    x = as_vector(x)
    grad_y = as_vector(grad_y, name="grad_y")
    check_same_length(x, grad_y, "x", "grad_y")
    norm = float(np.linalg.norm(x))
    if norm <= EPS_NORM:
        raise NearZeroNorm(f"norm {norm:.3e} <= {EPS_NORM:.0e}")
    y = x / norm
    return (grad_y - y * float(y @ grad_y)) / norm


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max-subtraction stabilization."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Single-sample softmax cross-entropy and its logit gradient.

    Returns ``(loss, grad)`` with ``loss = -log softmax(logits)[label]``
    and ``grad = softmax(logits) - onehot(label)``.  Uses max-subtraction
    so huge logits (e.g. radius-50 features) cannot overflow.
    """
    logits = as_vector(logits, name="logits")
    label_arr = as_labels([label], num_classes=logits.size, name="label")
    label = int(label_arr[0])
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def cosine_similarity(f_g, f_p) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Invariant to positive rescaling of either argument.
    """
    f_g = as_vector(f_g, name="f_g")
    f_p = as_vector(f_p, name="f_p")
    check_same_length(f_g, f_p, "f_g", "f_p")
    ng = float(np.linalg.norm(f_g))
    np_ = float(np.linalg.norm(f_p))
    if ng <= EPS_NORM or np_ <= EPS_NORM:
        raise NearZeroNorm("cosine undefined for a near-zero vector")
    return float(np.clip(f_g @ f_p / (ng * np_), -1.0, 1.0))
