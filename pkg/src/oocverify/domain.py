"""Core records passed between pipeline stages."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class Origin(str, enum.Enum):
    TEXT_SEARCH = "TextSearch"
    IMAGE_SEARCH = "ImageSearch"


class RequestKind(str, enum.Enum):
    TEXT_QUERY = "TextQuery"
    REVERSE_IMAGE = "ReverseImage"
    # non-search traffic that goes through the same cache
    TEXT_EMBEDDING = "TextEmbedding"
    IMAGE_EMBEDDING = "ImageEmbedding"
    IMAGE_FETCH = "ImageFetch"
    CHAT = "Chat"


@dataclass(frozen=True)
class ClaimPair:
    """An image-caption pair under verification. ``gold_label`` is True for OOC."""

    id: str
    image_ref: str
    caption: str
    gold_label: bool | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("claim id must be non-empty")
        if not self.caption or not self.caption.strip():
            raise ValueError(f"claim {self.id!r}: caption must be non-empty")
        if not self.image_ref:
            raise ValueError(f"claim {self.id!r}: image_ref must be non-empty")

    @property
    def image_path(self) -> Path:
        ref = self.image_ref
        if ref.startswith("file://"):
            ref = ref[len("file://"):]
        return Path(ref)


@dataclass(frozen=True)
class RetrievalRequest:
    kind: RequestKind
    payload: str
    limit: int = 10

    def __post_init__(self) -> None:
        if self.limit < 1:
            raise ValueError("limit must be >= 1")
        if not self.payload:
            raise ValueError("payload must be non-empty")


@dataclass(frozen=True)
class SimilarityScores:
    """Cosine scores of one candidate against the claim.

    ``final`` follows the visual-centric rule: it equals ``visual_sim`` when
    a visual score exists and falls back to ``text_sim`` otherwise.
    """

    text_sim: float | None = None
    visual_sim: float | None = None

    def __post_init__(self) -> None:
        if self.text_sim is None and self.visual_sim is None:
            raise ValueError("at least one of text_sim / visual_sim is required")
        for name in ("text_sim", "visual_sim"):
            value = getattr(self, name)
            if value is not None and not (math.isfinite(value) and -1.0 <= value <= 1.0):
                raise ValueError(f"{name}={value!r} outside [-1, 1]")

    @property
    def final(self) -> float:
        return self.visual_sim if self.visual_sim is not None else self.text_sim  # type: ignore[return-value]

    def best(self) -> float:
        return max(s for s in (self.text_sim, self.visual_sim) if s is not None)

    def to_dict(self) -> dict[str, float | None]:
        return {"text_sim": self.text_sim, "visual_sim": self.visual_sim, "final": self.final}


@dataclass(frozen=True)
class EvidenceCandidate:
    id: str
    origin: Origin
    source_url: str
    domain: str
    title: str | None = None
    snippet: str | None = None
    image_ref: str | None = None
    published_at: str | None = None
    language: str | None = None
    raw_meta: dict[str, Any] = field(default_factory=dict, compare=False)
    scores: SimilarityScores | None = None

    def __post_init__(self) -> None:
        if self.snippet is None and self.image_ref is None:
            raise ValueError(f"candidate {self.id!r} has neither snippet nor image")

    @property
    def text(self) -> str | None:
        """Candidate-side text used for similarity and language checks."""
        return self.snippet if self.snippet is not None else self.title

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "origin": self.origin.value,
            "source_url": self.source_url,
            "domain": self.domain,
            "title": self.title,
            "snippet": self.snippet,
            "image_ref": self.image_ref,
            "published_at": self.published_at,
            "language": self.language,
            "scores": None if self.scores is None else self.scores.to_dict(),
        }
