"""Visual-centric ordering of surviving evidence and top-k selection.

Candidates are ordered by visual similarity. Starting from the highest
visual score, each borderline group collects every following candidate
whose visual score is within ``band`` of the group's first member; inside a
group, text similarity decides. Candidates without a visual score come
last, ordered by text similarity. Exact ties keep their input order.
"""

from __future__ import annotations

import math
from typing import Any, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .domain import EvidenceCandidate
from .errors import UnscoredCandidate

DEFAULT_BAND = 0.01
DEFAULT_TOP_K = 3

_NEG_INF = -math.inf


def _text(c: EvidenceCandidate) -> float:
    t = c.scores.text_sim  # type: ignore[union-attr]
    return _NEG_INF if t is None else t


def borderline_groups(
    candidates: Sequence[EvidenceCandidate], band: float = DEFAULT_BAND
) -> list[list[EvidenceCandidate]]:
    """Visually scored candidates split into anchored borderline groups, best first."""
    visual = sorted(
        (c for c in candidates if c.scores is not None and c.scores.visual_sim is not None),
        key=lambda c: -c.scores.visual_sim,  # type: ignore[union-attr,operator]
    )
    groups: list[list[EvidenceCandidate]] = []
    anchor = _NEG_INF
    for c in visual:
        v = c.scores.visual_sim  # type: ignore[union-attr]
        if groups and anchor - v < band:  # type: ignore[operator]
            groups[-1].append(c)
        else:
            groups.append([c])
            anchor = v  # type: ignore[assignment]
    return groups


def rank_candidates(candidates: Sequence[EvidenceCandidate], band: float = DEFAULT_BAND) -> list[EvidenceCandidate]:
    for c in candidates:
        if c.scores is None:
            raise UnscoredCandidate(f"candidate {c.id} has no similarity scores")
    ranked: list[EvidenceCandidate] = []
    for group in borderline_groups(candidates, band):
        # sorted() is stable, so equal (text, visual) pairs keep input order
        ranked.extend(sorted(group, key=lambda c: (-_text(c), -c.scores.visual_sim)))  # type: ignore[union-attr]
    text_only = [c for c in candidates if c.scores.visual_sim is None]  # type: ignore[union-attr]
    ranked.extend(sorted(text_only, key=lambda c: -_text(c)))
    return ranked


def select_top_k(ordered: Sequence[EvidenceCandidate], k: int = DEFAULT_TOP_K) -> list[EvidenceCandidate]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return list(ordered[:k])


class VisualCentricRanker(TransformerMixin, BaseEstimator):
    """Ranks scored candidates and keeps the best ``top_k``."""

    def __init__(self, top_k: int = DEFAULT_TOP_K, borderline_band: float = DEFAULT_BAND) -> None:
        self.top_k = top_k
        self.borderline_band = borderline_band

    def fit(self, X: Any = None, y: Any = None) -> "VisualCentricRanker":
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.borderline_band < 0:
            raise ValueError("borderline_band must be >= 0")
        return self

    def transform(self, X: Sequence[EvidenceCandidate]) -> list[EvidenceCandidate]:
        return select_top_k(rank_candidates(X, self.borderline_band), self.top_k)
