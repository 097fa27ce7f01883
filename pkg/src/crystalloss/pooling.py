"""Template flattening: quality pooling, media-average pooling, and
quality attenuation of verification scores.

A template is a bag of media items (feature + face-detector probability);
pooling collapses it to a single feature vector.  All functions are pure
and keep a fixed summation order for bit-stable results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch, EmptyTemplate, ProbabilityOutOfRange
from .validation import as_vector

__all__ = [
    "MediaItem",
    "Template",
    "LOGIT_CAP",
    "detection_logit",
    "quality_pool",
    "media_average_pool",
    "template_lomax",
    "quality_attenuate",
]

# Upper bound on the half-log-odds so near-1.0 detection scores cannot
# produce exponentially large pooling weights.
LOGIT_CAP = 7.0


@dataclass(frozen=True)
class MediaItem:
    """One image/frame: its feature and the detector's probability score.

    Scores of exactly 0 or 1 must be clamped at ingest; the item itself
    requires the open interval.
    """

    media_id: str
    feature: np.ndarray
    detection_score: float

    def __post_init__(self):
        object.__setattr__(self, "feature", as_vector(self.feature, name="feature"))
        if not 0.0 < self.detection_score < 1.0:
            raise ProbabilityOutOfRange(
                f"detection_score must be in (0, 1), got {self.detection_score}"
            )


@dataclass(frozen=True)
class Template:
    """All media items for one subject instance."""

    template_id: str
    subject_id: str
    items: tuple[MediaItem, ...] = field(default_factory=tuple)

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise EmptyTemplate(f"template {self.template_id!r} has no items")
        dim = items[0].feature.size
        for item in items[1:]:
            if item.feature.size != dim:
                raise DimensionMismatch(
                    f"template {self.template_id!r} mixes feature dimensions"
                )
        object.__setattr__(self, "items", items)

    @property
    def dim(self) -> int:
        return self.items[0].feature.size


def detection_logit(p: float) -> float:
    """Half log-odds of a detection probability, capped above at 7.

    The cap only bounds the top end; very low scores keep their (negative)
    logit.
    """
    if not 0.0 < p < 1.0:
        raise ProbabilityOutOfRange(f"p must be in (0, 1), got {p}")
    return min(0.5 * math.log(p / (1.0 - p)), LOGIT_CAP)


def _pool_weights(template: Template, lam: float) -> np.ndarray:
    logits = np.array([detection_logit(item.detection_score) for item in template.items])
    scaled = lam * logits
    scaled -= scaled.max()
    w = np.exp(scaled)
    return w / w.sum()


def quality_pool(template: Template, lam: float = 0.3) -> np.ndarray:
    """Softmax-weighted feature average, weights ``exp(lam * logit_i)``.

    lam = 0 reduces to the arithmetic mean; lam -> inf converges to the
    feature of the max-score item (items tied at the logit cap share
    weight equally).  Coefficients are >= 0 and sum to 1.
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if not template.items:
        raise EmptyTemplate("cannot pool an empty template")
    w = _pool_weights(template, lam)
    feats = np.stack([item.feature for item in template.items])
    return w @ feats


def media_average_pool(template: Template) -> np.ndarray:
    """Two-stage mean: average within each media group, then across groups,
    so one media with many frames does not dominate.  Groups keep first-
    appearance order."""
    if not template.items:
        raise EmptyTemplate("cannot pool an empty template")
    groups: dict[str, list[np.ndarray]] = {}
    for item in template.items:
        groups.setdefault(item.media_id, []).append(item.feature)
    means = [np.mean(np.stack(feats), axis=0) for feats in groups.values()]
    return np.mean(np.stack(means), axis=0)


def template_lomax(template: Template) -> float:
    """Maximum detection score over the template's items."""
    if not template.items:
        raise EmptyTemplate("empty template has no max score")
    return max(item.detection_score for item in template.items)


def quality_attenuate(score: float, lomax1: float, lomax2: float,
                      gamma: float = 1.1, det_threshold: float = 0.75) -> float:
    """Divide a similarity score by gamma when either template's max
    detection score is at or below the threshold; otherwise pass it through.

    gamma = 1 is the identity.  The division is applied literally, so
    negative cosine scores move toward zero when triggered.
    """
    if lomax1 <= det_threshold or lomax2 <= det_threshold:
        return score / gamma
    return score
