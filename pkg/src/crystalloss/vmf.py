"""von Mises-Fisher distribution on the unit hypersphere: density,
sampling, the MAP-estimate loss it induces, and a synthetic dataset
generator used by the desk-scale experiments.

Sampling follows the classic rejection scheme for the cosine component
(Wood 1994 / Ulrich 1984) with a uniform tangential completion, as in
https://stats.stackexchange.com/questions/156729
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import FeatureDataset, FeatureRecord
from .exceptions import DimensionMismatch, NotUnitVector
from .linalg import log_softmax
from .validation import as_labels, as_matrix, as_vector

__all__ = ["VmfDistribution", "LogDensity", "map_loss", "make_synthetic_dataset"]

UNIT_TOL = 1e-6


class LogDensity(NamedTuple):
    """Log-density value plus whether the normalization constant is included
    (closed form available only in 3 dimensions)."""

    value: float
    normalized: bool


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_unit_rows(X: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(X, axis=1)
    off = np.abs(norms - 1.0)
    if np.any(off > UNIT_TOL):
        bad = int(np.argmax(off))
        raise NotUnitVector(f"{name} row {bad} has norm {norms[bad]:.6f}")


def _log_sinh(k: float) -> float:
    # log(sinh k) = k + log1p(-exp(-2k)) - log 2, stable for any k > 0
    return k + math.log1p(-math.exp(-2.0 * k)) - math.log(2.0)


@dataclass(frozen=True)
class VmfDistribution:
    """Mean direction ``mu`` (unit norm), concentration ``kappa`` >= 0."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = as_vector(self.mu, name="mu")
        if mu.size < 2:
            raise DimensionMismatch("vMF needs dimension >= 2")
        if abs(float(np.linalg.norm(mu)) - 1.0) > 1e-10:
            raise NotUnitVector(f"mu has norm {np.linalg.norm(mu):.12f}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self) -> int:
        return self.mu.size

    def log_normalizer(self) -> float:
        """log C_p(kappa); closed form shipped for p = 3 only."""
        if self.dim != 3:
            raise NotImplementedError(
                "normalization constant available in closed form only for p=3"
            )
        if self.kappa == 0.0:
            return -math.log(4.0 * math.pi)  # kappa/sinh(kappa) -> 1
        return math.log(self.kappa) - math.log(4.0 * math.pi) - _log_sinh(self.kappa)

    def log_density(self, x) -> LogDensity:
        """Log-density at a unit vector ``x``.

        For p = 3 the value includes the normalization constant; for other
        dimensions the unnormalized ``kappa * mu.x`` is returned with
        ``normalized=False`` (density ratios and the MAP loss never need
        the constant).
        """
        x = as_vector(x)
        if x.size != self.dim:
            raise DimensionMismatch(f"x has dimension {x.size}, expected {self.dim}")
        if abs(float(np.linalg.norm(x)) - 1.0) > UNIT_TOL:
            raise NotUnitVector(f"x has norm {np.linalg.norm(x):.8f}")
        dot = self.kappa * float(self.mu @ x)
        if self.dim == 3:
            return LogDensity(self.log_normalizer() + dot, True)
        return LogDensity(dot, False)

    def sample(self, n: int, seed=0) -> np.ndarray:
        """Draw ``n`` unit-norm rows, deterministic for a given seed.

        Rejection-samples the cosine w of the angle to mu, then completes
        with a uniform tangential direction:
        ``x = sqrt(1 - w^2) v + w mu``.
        """
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        rng = _as_rng(seed)
        p, kappa = self.dim, self.kappa
        m = p - 1
        b = m / (math.sqrt(4.0 * kappa**2 + m**2) + 2.0 * kappa)
        x0 = (1.0 - b) / (1.0 + b)
        c = kappa * x0 + m * math.log(1.0 - x0**2)

        w = np.empty(n)
        filled = 0
        while filled < n:
            todo = n - filled
            z = rng.beta(m / 2.0, m / 2.0, size=todo)
            cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
            u = rng.uniform(size=todo)
            ok = kappa * cand + m * np.log(1.0 - x0 * cand) - c >= np.log(u)
            take = cand[ok]
            w[filled : filled + take.size] = take
            filled += take.size

        # uniform direction orthogonal to mu
        v = rng.standard_normal((n, p))
        v -= np.outer(v @ self.mu, self.mu)
        vnorm = np.linalg.norm(v, axis=1)
        while np.any(vnorm < 1e-12):  # essentially never
            bad = vnorm < 1e-12
            v[bad] = rng.standard_normal((int(bad.sum()), p))
            v[bad] -= np.outer(v[bad] @ self.mu, self.mu)
            vnorm = np.linalg.norm(v, axis=1)
        v /= vnorm[:, None]

        X = np.sqrt(np.maximum(0.0, 1.0 - w**2))[:, None] * v + w[:, None] * self.mu
        return X / np.linalg.norm(X, axis=1)[:, None]


def map_loss(features, class_mus, kappa: float, labels) -> float:
    """Mean negative log posterior of the true class under per-class vMF
    components sharing one concentration.

    Identical to the crystal loss with unit-row classifier weights, zero
    bias and radius kappa, evaluated on pre-normalized features.
    """
    X = as_matrix(features, name="features")
    M = as_matrix(class_mus, name="class_mus")
    if X.shape[1] != M.shape[1]:
        raise DimensionMismatch(
            f"features have dimension {X.shape[1]}, class means {M.shape[1]}"
        )
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    _check_unit_rows(X, "features")
    _check_unit_rows(M, "class_mus")
    y = as_labels(labels, num_classes=M.shape[0])
    if y.size != X.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} features but {y.size} labels")
    logits = kappa * (X @ M.T)
    logp = log_softmax(logits)
    return float(-logp[np.arange(y.size), y].mean())


def _class_means(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if num_classes <= dim:
        # orthonormal directions via QR of a Gaussian matrix
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        return q.T.copy()
    means = rng.standard_normal((num_classes, dim))
    return means / np.linalg.norm(means, axis=1)[:, None]


def make_synthetic_dataset(num_classes: int, dim: int, kappa: float,
                           per_class: int, seed=0, *,
                           items_per_template: int = 5,
                           score_gain: float = 5.0,
                           score_bias: float = 1.0) -> FeatureDataset:
    """Labeled unit-norm samples with a synthetic detection-score column.

    Class mean directions are orthonormal when num_classes <= dim, random
    unit vectors otherwise.  Each sample's detection score is a sigmoid of
    its cosine to the class mean (``sigmoid(gain * cos + bias)``), so
    better-aligned samples look like better-quality media.  Samples are
    chunked into templates of ``items_per_template``, each item its own
    media.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if items_per_template < 1:
        raise ValueError("items_per_template must be >= 1")
    rng = _as_rng(seed)
    means = _class_means(num_classes, dim, rng)
    records = []
    for c in range(num_classes):
        dist = VmfDistribution(means[c], kappa)
        samples = dist.sample(per_class, rng)
        cos = samples @ means[c]
        scores = 1.0 / (1.0 + np.exp(-(score_gain * cos + score_bias)))
        scores = np.clip(scores, 1e-7, 1.0 - 1e-7)
        for i in range(per_class):
            t = i // items_per_template
            records.append(
                FeatureRecord(
                    subject_id=f"s{c}",
                    template_id=f"s{c}_t{t}",
                    media_id=f"s{c}_t{t}_m{i % items_per_template}",
                    detection_score=float(scores[i]),
                    feature=samples[i],
                )
            )
    return FeatureDataset(records)
