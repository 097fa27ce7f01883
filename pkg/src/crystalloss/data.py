"""In-memory carrier for feature datasets: one record per media item, with
the subject/template/media grouping the pooling and evaluation stages need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InconsistentDimension, ProbabilityOutOfRange
from .pooling import MediaItem, Template
from .validation import as_vector

__all__ = ["FeatureRecord", "FeatureDataset"]


@dataclass(frozen=True)
class FeatureRecord:
    subject_id: str
    template_id: str
    media_id: str
    detection_score: float
    feature: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "feature", as_vector(self.feature, name="feature"))
        if not 0.0 < self.detection_score < 1.0:
            raise ProbabilityOutOfRange(
                f"detection_score must be in (0, 1), got {self.detection_score}"
            )


class FeatureDataset:
    """Ordered list of records sharing one feature dimension."""

    def __init__(self, records: list[FeatureRecord]):
        if not records:
            raise ValueError("dataset must contain at least one record")
        dim = records[0].feature.size
        for rec in records:
            if rec.feature.size != dim:
                raise InconsistentDimension(
                    f"record {rec.template_id}/{rec.media_id} has dimension "
                    f"{rec.feature.size}, expected {dim}"
                )
        self.records = list(records)
        self.dim = dim

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subjects(self) -> list[str]:
        """Distinct subject ids, sorted (stable label coding)."""
        return sorted({rec.subject_id for rec in self.records})

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """(X, y, class_names): features stacked in record order, labels as
        indices into the sorted subject list."""
        names = self.subjects()
        index = {s: i for i, s in enumerate(names)}
        X = np.stack([rec.feature for rec in self.records])
        y = np.array([index[rec.subject_id] for rec in self.records], dtype=np.int64)
        return X, y, names

    def templates(self) -> dict[str, Template]:
        """Group records into templates, preserving first-appearance order.

        A template id must map to a single subject.
        """
        grouped: dict[str, tuple[str, list[MediaItem]]] = {}
        for rec in self.records:
            subject, items = grouped.setdefault(rec.template_id, (rec.subject_id, []))
            if subject != rec.subject_id:
                raise ValueError(
                    f"template {rec.template_id!r} spans subjects "
                    f"{subject!r} and {rec.subject_id!r}"
                )
            items.append(MediaItem(rec.media_id, rec.feature, rec.detection_score))
        return {
            tid: Template(tid, subject, tuple(items))
            for tid, (subject, items) in grouped.items()
        }
