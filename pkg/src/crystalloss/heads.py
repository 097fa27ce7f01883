"""Classifier heads: the L2-constrained (crystal) softmax head and the
plain softmax baseline, with exact analytic gradients, plus the scale
lower-bound formulas.

A head is an immutable parameter value; forward/backward never mutate it
and parameter updates produce a new head (``dataclasses.replace``), so
forward/backward are thread-safe.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DimensionMismatch,
    InvalidClassCount,
    InvalidProbability,
    NearZeroNorm,
    NonPositiveAlpha,
)
from .linalg import EPS_NORM, log_softmax
from .validation import as_labels, as_matrix, as_vector

__all__ = [
    "CrystalHead",
    "SoftmaxHead",
    "LossBatchResult",
    "crystal_forward",
    "crystal_backward",
    "softmax_head_forward_backward",
    "head_forward",
    "head_backward",
    "head_logits",
    "avg_class_probability",
    "alpha_lower_bound",
    "glorot_uniform",
]

# Trainable alpha is clamped here after each update so the radius stays
# strictly positive.
ALPHA_FLOOR = 0.1


def glorot_uniform(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass(frozen=True)
class CrystalHead:
    """Linear classifier applied to features constrained to radius alpha.

    weights has shape (num_classes, feature_dim); bias has length
    num_classes; alpha is the hypersphere radius (> 0).
    """

    weights: np.ndarray
    bias: np.ndarray
    alpha: float
    alpha_trainable: bool = False

    def __post_init__(self):
        w = as_matrix(self.weights, name="weights")
        b = as_vector(self.bias, name="bias")
        if w.shape[0] != b.size:
            raise DimensionMismatch(
                f"weights has {w.shape[0]} rows but bias has length {b.size}"
            )
        if not self.alpha > 0:
            raise NonPositiveAlpha(f"alpha must be > 0, got {self.alpha}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialize(
        cls,
        num_classes: int,
        feature_dim: int,
        alpha: float,
        rng: np.random.Generator,
        alpha_trainable: bool = False,
    ) -> "CrystalHead":
        """Fresh head: zero bias, glorot-uniform weights."""
        return cls(
            weights=glorot_uniform(num_classes, feature_dim, rng),
            bias=np.zeros(num_classes),
            alpha=alpha,
            alpha_trainable=alpha_trainable,
        )


@dataclass(frozen=True)
class SoftmaxHead:
    """Plain linear softmax classifier (no feature normalization)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = as_matrix(self.weights, name="weights")
        b = as_vector(self.bias, name="bias")
        if w.shape[0] != b.size:
            raise DimensionMismatch(
                f"weights has {w.shape[0]} rows but bias has length {b.size}"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialize(
        cls, num_classes: int, feature_dim: int, rng: np.random.Generator
    ) -> "SoftmaxHead":
        return cls(
            weights=glorot_uniform(num_classes, feature_dim, rng),
            bias=np.zeros(num_classes),
        )


@dataclass(frozen=True)
class LossBatchResult:
    """Mean batch loss plus exact gradients for every parameter block.

    grad_alpha is always reported; the trainer applies it only when the
    head's alpha is trainable.
    """

    loss: float
    grad_features: np.ndarray  # (M, D)
    grad_weights: np.ndarray  # (C, D)
    grad_bias: np.ndarray  # (C,)
    grad_alpha: float


def _check_batch(weights: np.ndarray, features, labels):
    F = as_matrix(features, name="features")
    if F.shape[1] != weights.shape[1]:
        raise DimensionMismatch(
            f"features have dimension {F.shape[1]}, head expects {weights.shape[1]}"
        )
    y = as_labels(labels, num_classes=weights.shape[0])
    if y.size != F.shape[0]:
        raise DimensionMismatch(
            f"{F.shape[0]} feature rows but {y.size} labels"
        )
    if y.size == 0:
        raise DimensionMismatch("batch must be nonempty")
    return F, y


def _constrained_batch(head: CrystalHead, features, labels):
    F, y = _check_batch(head.weights, features, labels)
    norms = np.linalg.norm(F, axis=1)
    bad = np.flatnonzero(norms <= EPS_NORM)
    if bad.size:
        raise NearZeroNorm(f"feature row {bad[0]} has near-zero norm")
    Y = F / norms[:, None]
    Z = head.alpha * Y
    logits = Z @ head.weights.T + head.bias
    return F, y, norms, Y, Z, logits


def _mean_cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(y.size), y].mean())


def _softmax_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean loss)/d(logits): (softmax - onehot) / batch_size."""
    p = np.exp(log_softmax(logits))
    p[np.arange(y.size), y] -= 1.0
    return p / y.size


def crystal_forward(head: CrystalHead, features, labels) -> float:
    """Mean softmax cross-entropy on features renormalized to radius alpha.

    Each feature row f is replaced by ``alpha * f / ||f||`` before the
    linear classifier, so the loss is invariant to per-row rescaling.
    """
    _, y, _, _, _, logits = _constrained_batch(head, features, labels)
    return _mean_cross_entropy(logits, y)


def crystal_backward(head: CrystalHead, features, labels) -> LossBatchResult:
    """Exact gradients of :func:`crystal_forward` w.r.t. features, W, b, alpha.

    grad_alpha is the chain-rule contraction of the scale-layer output
    gradient with the unit features: ``sum_ij dL/dz_ij * y_ij``.
    """
    F, y, norms, Y, Z, logits = _constrained_batch(head, features, labels)
    loss = _mean_cross_entropy(logits, y)
    G = _softmax_grad(logits, y)  # (M, C) = dL/dlogits
    grad_bias = G.sum(axis=0)
    grad_weights = G.T @ Z
    grad_z = G @ head.weights  # (M, D)
    grad_alpha = float(np.sum(grad_z * Y))
    grad_y = head.alpha * grad_z
    # rows of the normalization Jacobian: (g - y (y.g)) / ||f||
    radial = np.sum(grad_y * Y, axis=1, keepdims=True)
    grad_features = (grad_y - Y * radial) / norms[:, None]
    return LossBatchResult(loss, grad_features, grad_weights, grad_bias, grad_alpha)


def softmax_head_forward_backward(weights, bias, features, labels) -> LossBatchResult:
    """Baseline head with no normalization; grad_alpha reported as 0."""
    head = SoftmaxHead(weights=weights, bias=bias)
    F, y = _check_batch(head.weights, features, labels)
    logits = F @ head.weights.T + head.bias
    loss = _mean_cross_entropy(logits, y)
    G = _softmax_grad(logits, y)
    return LossBatchResult(
        loss=loss,
        grad_features=G @ head.weights,
        grad_weights=G.T @ F,
        grad_bias=G.sum(axis=0),
        grad_alpha=0.0,
    )


def head_forward(head, features, labels) -> float:
    """Mean batch loss for either head kind."""
    if isinstance(head, CrystalHead):
        return crystal_forward(head, features, labels)
    return softmax_head_forward_backward(
        head.weights, head.bias, features, labels
    ).loss


def head_backward(head, features, labels) -> LossBatchResult:
    if isinstance(head, CrystalHead):
        return crystal_backward(head, features, labels)
    return softmax_head_forward_backward(head.weights, head.bias, features, labels)


def head_logits(head, features) -> np.ndarray:
    """Classifier logits for prediction (no loss)."""
    F = as_matrix(features, name="features")
    if F.shape[1] != head.feature_dim:
        raise DimensionMismatch(
            f"features have dimension {F.shape[1]}, head expects {head.feature_dim}"
        )
    if isinstance(head, CrystalHead):
        norms = np.linalg.norm(F, axis=1)
        bad = np.flatnonzero(norms <= EPS_NORM)
        if bad.size:
            raise NearZeroNorm(f"feature row {bad[0]} has near-zero norm")
        F = head.alpha * F / norms[:, None]
    return F @ head.weights.T + head.bias


def apply_gradients(head, result: LossBatchResult, lr: float):
    """One SGD step; returns a new head value (inputs untouched)."""
    if isinstance(head, CrystalHead):
        alpha = head.alpha
        if head.alpha_trainable:
            alpha = max(ALPHA_FLOOR, alpha - lr * result.grad_alpha)
        return dataclasses.replace(
            head,
            weights=head.weights - lr * result.grad_weights,
            bias=head.bias - lr * result.grad_bias,
            alpha=alpha,
        )
    return dataclasses.replace(
        head,
        weights=head.weights - lr * result.grad_weights,
        bias=head.bias - lr * result.grad_bias,
    )


def avg_class_probability(alpha: float, num_classes: int, exact4: bool = False) -> float:
    """Average softmax probability of the true class for features sitting on
    orthogonal class centers at radius alpha.

    With ``exact4`` the four-class closed form ``e^a / (e^a + 2 + e^-a)`` is
    used (requires ``num_classes == 4``); otherwise the generalized form
    ``e^a / (e^a + C - 2)``, which drops the ``e^-a`` term.  Both are
    evaluated in a stabilized way so large alpha cannot overflow.
    """
    if num_classes < 3:
        raise InvalidClassCount(f"num_classes must be >= 3, got {num_classes}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if exact4:
        if num_classes != 4:
            raise InvalidClassCount("exact4 form is defined only for 4 classes")
        return 1.0 / (1.0 + 2.0 * math.exp(-alpha) + math.exp(-2.0 * alpha))
    return 1.0 / (1.0 + (num_classes - 2) * math.exp(-alpha))


def alpha_lower_bound(num_classes: int, p: float) -> float:
    """Smallest radius achieving average true-class probability ``p``:
    ``log(p (C - 2) / (1 - p))``, natural log.

    Exact algebraic inverse of :func:`avg_class_probability` (exact4=False).
    """
    if num_classes < 3:
        raise InvalidClassCount(f"num_classes must be >= 3, got {num_classes}")
    if not 0.0 < p < 1.0:
        raise InvalidProbability(f"p must be in (0, 1), got {p}")
    return math.log(p * (num_classes - 2) / (1.0 - p))
