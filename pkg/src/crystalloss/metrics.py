"""Pair scoring and the verification/identification metric suite.

Conventions (the benchmark papers leave these unstated, so they are pinned
here for reproducibility):

* ROC thresholds sit at every distinct score; a score counts as accepted
  when ``score >= threshold``.
* TAR@FAR uses the conservative step convention: the best TAR among
  thresholds whose FAR does not exceed the target, no interpolation.
  If no threshold achieves the target the answer is 0.
* Ranking ties are broken by gallery input order (stable sort).

Everything here is a pure function of its inputs; scoring work is
per-pair/per-probe and safe under concurrent read-only dataset access.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DegenerateLabels,
    DimensionMismatch,
    MissingTemplate,
    NoNonMatedProbes,
    ProbeWithoutMate,
)
from .linalg import cosine_similarity
from .pooling import (
    Template,
    media_average_pool,
    quality_attenuate,
    quality_pool,
    template_lomax,
)

__all__ = [
    "PairProtocol",
    "IdentProtocol",
    "RocCurve",
    "ScoredPair",
    "EvalReport",
    "pool_template",
    "score_pairs",
    "roc",
    "tar_at_far",
    "tpir_at_fpir",
    "closed_set_identify",
    "open_set_identify",
    "norm_bin_analysis",
]

POOLING_KINDS = ("media_average", "quality")

MATCH, NONMATCH, UNKNOWN = 1, 0, None


@dataclass(frozen=True)
class PairProtocol:
    """Verification pairs: (template_id_1, template_id_2, label) with label
    1 = match, 0 = nonmatch, None = unknown (scored but excluded from ROC).
    """

    pairs: tuple[tuple[str, str, int | None], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        for _, _, label in self.pairs:
            if label not in (MATCH, NONMATCH, UNKNOWN):
                raise ValueError(f"pair label must be 1, 0 or None, got {label!r}")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class IdentProtocol:
    """1:N protocol: gallery and probe template ids, open-set flag."""

    gallery: tuple[str, ...]
    probes: tuple[str, ...]
    open_set: bool = False

    def __post_init__(self):
        object.__setattr__(self, "gallery", tuple(self.gallery))
        object.__setattr__(self, "probes", tuple(self.probes))
        if not self.gallery:
            raise ValueError("gallery must be nonempty")
        if not self.probes:
            raise ValueError("probes must be nonempty")


@dataclass(frozen=True)
class ScoredPair:
    template_id_1: str
    template_id_2: str
    label: int | None
    score: float


@dataclass(frozen=True)
class RocCurve:
    """Stepwise ROC: one point per distinct score threshold, ascending.

    far and tar are both non-increasing as the threshold increases.
    """

    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return [
            (float(t), float(f), float(a))
            for t, f, a in zip(self.thresholds, self.far, self.tar)
        ]


@dataclass
class EvalReport:
    """Bundle of whatever the evaluation produced; io.write_summary emits
    the key=value view."""

    roc: RocCurve | None = None
    tar_table: dict[float, float] = field(default_factory=dict)
    rank_rates: dict[int, float] = field(default_factory=dict)
    tpir_points: list[tuple[float, float]] = field(default_factory=list)
    tpir_table: dict[float, float] = field(default_factory=dict)
    scored_pairs: list[ScoredPair] = field(default_factory=list)
    extras: dict[str, float] = field(default_factory=dict)


def pool_template(template: Template, pooling: str = "media_average",
                  lam: float = 0.3) -> np.ndarray:
    if pooling == "media_average":
        return media_average_pool(template)
    if pooling == "quality":
        return quality_pool(template, lam)
    raise ValueError(f"pooling must be one of {POOLING_KINDS}, got {pooling!r}")


def _pooled_features(templates: dict[str, Template], ids, pooling: str,
                     lam: float) -> dict[str, np.ndarray]:
    pooled = {}
    for tid in ids:
        if tid not in templates:
            raise MissingTemplate(f"template {tid!r} not in dataset")
        pooled[tid] = pool_template(templates[tid], pooling, lam)
    return pooled


def score_pairs(templates: dict[str, Template], protocol: PairProtocol,
                pooling: str = "media_average", lam: float = 0.3,
                attenuation: tuple[float, float] | None = None,
                shift_scores: bool = False) -> list[ScoredPair]:
    """Cosine of pooled template features for every protocol pair.

    ``attenuation=(gamma, det_threshold)`` rescales each pair's score by
    1/gamma when either template's max detection score is at or below the
    threshold.  Dividing a negative cosine moves it toward zero (i.e. up);
    ``shift_scores`` maps cosines into [0, 1] via (s + 1) / 2 before
    attenuation, making the attenuation strictly monotone.  Off by
    default: the literal algorithm divides the raw cosine.
    """
    ids = {tid for t1, t2, _ in protocol.pairs for tid in (t1, t2)}
    pooled = _pooled_features(templates, sorted(ids), pooling, lam)
    lomax = {tid: template_lomax(templates[tid]) for tid in pooled}
    out = []
    for t1, t2, label in protocol.pairs:
        s = cosine_similarity(pooled[t1], pooled[t2])
        if shift_scores:
            s = (s + 1.0) / 2.0
        if attenuation is not None:
            gamma, det_threshold = attenuation
            s = quality_attenuate(s, lomax[t1], lomax[t2], gamma, det_threshold)
        out.append(ScoredPair(t1, t2, label, s))
    return out


def roc(scores) -> RocCurve:
    """ROC from (score, label) pairs, label truthy for match.

    Thresholds at every distinct score; FAR/TAR are the fractions of
    nonmatch/match scores >= threshold.
    """
    pts = [(float(s), bool(l)) for s, l in scores]
    match = np.array([s for s, l in pts if l])
    nonmatch = np.array([s for s, l in pts if not l])
    if match.size == 0 or nonmatch.size == 0:
        raise DegenerateLabels("need at least one match and one nonmatch score")
    thresholds = np.unique(np.concatenate([match, nonmatch]))
    # score >= t counts as accept; searchsorted('left') counts entries < t
    match_sorted = np.sort(match)
    nonmatch_sorted = np.sort(nonmatch)
    tar = (match.size - np.searchsorted(match_sorted, thresholds, side="left")) / match.size
    far = (
        nonmatch.size - np.searchsorted(nonmatch_sorted, thresholds, side="left")
    ) / nonmatch.size
    return RocCurve(thresholds=thresholds, far=far, tar=tar)


def tar_at_far(curve: RocCurve, far_target: float) -> float:
    """Best TAR among thresholds with FAR <= target (stepwise, conservative);
    0 if no threshold achieves the target."""
    ok = curve.far <= far_target
    if not np.any(ok):
        return 0.0
    return float(curve.tar[ok].max())


def tpir_at_fpir(points, fpir_target: float) -> float:
    """Best TPIR among sweep points with FPIR <= target; 0 if unreachable."""
    ok = [tp for fp, tp in points if fp <= fpir_target]
    return max(ok) if ok else 0.0


def _subject_of(templates: dict[str, Template], tid: str) -> str:
    if tid not in templates:
        raise MissingTemplate(f"template {tid!r} not in dataset")
    return templates[tid].subject_id


def _probe_gallery_scores(templates, protocol, pooling, lam):
    pooled = _pooled_features(
        templates, sorted(set(protocol.gallery) | set(protocol.probes)), pooling, lam
    )
    G = np.stack([pooled[g] for g in protocol.gallery])
    Gn = G / np.linalg.norm(G, axis=1)[:, None]
    P = np.stack([pooled[p] for p in protocol.probes])
    Pn = P / np.linalg.norm(P, axis=1)[:, None]
    return np.clip(Pn @ Gn.T, -1.0, 1.0)  # (num_probes, num_gallery)


def closed_set_identify(templates: dict[str, Template], protocol: IdentProtocol,
                        pooling: str = "media_average", lam: float = 0.3,
                        ranks: tuple[int, ...] = (1, 5, 10)) -> dict[int, float]:
    """Rank-k retrieval rates.  Every probe subject must appear in the
    gallery; ties are broken by gallery input order."""
    gallery_subjects = np.array([_subject_of(templates, g) for g in protocol.gallery])
    scores = _probe_gallery_scores(templates, protocol, pooling, lam)
    mate_ranks = []
    for i, probe_id in enumerate(protocol.probes):
        subject = _subject_of(templates, probe_id)
        mates = gallery_subjects == subject
        if not mates.any():
            raise ProbeWithoutMate(
                f"probe {probe_id!r} (subject {subject!r}) has no gallery mate"
            )
        order = np.argsort(-scores[i], kind="stable")
        mate_ranks.append(int(np.flatnonzero(mates[order])[0]))  # 0-based
    mate_ranks = np.array(mate_ranks)
    return {k: float((mate_ranks < k).mean()) for k in ranks}


def open_set_identify(templates: dict[str, Template], protocol: IdentProtocol,
                      pooling: str = "media_average",
                      lam: float = 0.3) -> list[tuple[float, float]]:
    """(FPIR, TPIR) sweep over thresholds on the top-1 gallery score.

    FPIR: fraction of non-mated probes whose top score passes the
    threshold.  TPIR: fraction of mated probes whose top-1 gallery entry is
    their mate AND passes the threshold.  Points are sorted by FPIR
    ascending and include the all-rejected endpoint (0, 0).
    """
    gallery_subjects = np.array([_subject_of(templates, g) for g in protocol.gallery])
    probe_subjects = np.array([_subject_of(templates, p) for p in protocol.probes])
    mated = np.isin(probe_subjects, gallery_subjects)
    if not (~mated).any():
        raise NoNonMatedProbes("open-set protocol needs probes without gallery mates")
    scores = _probe_gallery_scores(templates, protocol, pooling, lam)
    top = np.argmax(scores, axis=1)  # argmax keeps lowest index on ties
    top_scores = scores[np.arange(scores.shape[0]), top]
    top_correct = gallery_subjects[top] == probe_subjects

    imp_scores = np.sort(top_scores[~mated])
    gen_scores = top_scores[mated]
    gen_hit = top_correct[mated]

    thresholds = np.unique(top_scores)
    points = [(0.0, 0.0)]  # threshold above every score
    for t in thresholds[::-1]:
        fpir = float((imp_scores >= t).mean())
        tpir = float((gen_hit & (gen_scores >= t)).mean()) if gen_scores.size else 0.0
        points.append((fpir, tpir))
    # dedupe identical points, keep sweep order (fpir ascending)
    seen = []
    for p in points:
        if not seen or seen[-1] != p:
            seen.append(p)
    return seen


def norm_bin_analysis(templates: dict[str, Template], bin_edges,
                      protocol: PairProtocol):
    """Diagnostic: split templates by the L2-norm of their mean raw feature
    and build one ROC per unordered bin pair.

    Bins are labeled 1..len(edges)+1 from low to high norm; a pair of
    templates from bins x <= y lands in group "x-y".  Groups missing a
    match or a nonmatch cannot produce an ROC and are reported in the
    second return value instead.

    Returns ``(curves, skipped)``: dict group label -> RocCurve, and the
    sorted list of skipped group labels.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 1:
        raise DimensionMismatch("bin_edges must be a nonempty 1-D sequence")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be strictly increasing")

    ids = {tid for t1, t2, _ in protocol.pairs for tid in (t1, t2)}
    pooled, bins = {}, {}
    for tid in sorted(ids):
        if tid not in templates:
            raise MissingTemplate(f"template {tid!r} not in dataset")
        mean_raw = np.mean(np.stack([it.feature for it in templates[tid].items]), axis=0)
        pooled[tid] = mean_raw
        bins[tid] = int(np.searchsorted(edges, np.linalg.norm(mean_raw), side="left"))

    grouped: dict[str, list[tuple[float, bool]]] = {}
    for t1, t2, label in protocol.pairs:
        if label is UNKNOWN:
            continue
        lo, hi = sorted((bins[t1], bins[t2]))
        key = f"{lo + 1}-{hi + 1}"
        grouped.setdefault(key, []).append(
            (cosine_similarity(pooled[t1], pooled[t2]), bool(label))
        )

    curves, skipped = {}, []
    for key in sorted(grouped):
        labels = {l for _, l in grouped[key]}
        if labels == {True, False}:
            curves[key] = roc(grouped[key])
        else:
            skipped.append(key)
    return curves, skipped
