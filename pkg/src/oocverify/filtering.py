"""Two-stage evidence refinement.

Stage one keeps candidates whose similarity to the claim clears a
threshold. Stage two applies contextual filters: trusted domains, language,
and domain-title deduplication. Every stage returns the surviving
candidates in input order plus a trace entry for each input candidate.
"""

from __future__ import annotations

import enum
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .domain import EvidenceCandidate, Origin
from .errors import EmptyAllowlist, UnscoredCandidate
from .langid import detect_language, matches

DEFAULT_THETA = 0.7

# The four VisualNews outlets; BBC publishes under both registrable domains.
DEFAULT_ALLOWLIST = frozenset(
    {"theguardian.com", "bbc.co.uk", "bbc.com", "usatoday.com", "washingtonpost.com"}
)


class Strategy(str, enum.Enum):
    SIMILARITY_ONLY = "similarity"
    DOMAIN_ONLY = "domain"
    BOTH = "both"


@dataclass(frozen=True)
class TraceEntry:
    candidate_id: str
    kept: bool
    stage: str | None = None
    value: Any = None

    def to_dict(self) -> dict[str, Any]:
        return {"candidate_id": self.candidate_id, "kept": self.kept, "stage": self.stage, "value": self.value}


@dataclass
class FilterTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    @property
    def removed(self) -> list[TraceEntry]:
        return [e for e in self.entries if not e.kept]

    @property
    def kept_ids(self) -> list[str]:
        return [e.candidate_id for e in self.entries if e.kept]

    def stage_of(self, candidate_id: str) -> str | None:
        for e in self.entries:
            if e.candidate_id == candidate_id:
                return e.stage
        raise KeyError(candidate_id)

    def then(self, later: "FilterTrace") -> "FilterTrace":
        """Compose with the trace of a stage that ran on this stage's survivors."""
        later_by_id = {e.candidate_id: e for e in later.entries}
        out = [e if not e.kept else later_by_id.get(e.candidate_id, e) for e in self.entries]
        return FilterTrace(out)

    def to_list(self) -> list[dict[str, Any]]:
        return [e.to_dict() for e in self.entries]


Stage = tuple[list[EvidenceCandidate], FilterTrace]


@dataclass(frozen=True)
class FilterConfig:
    theta: float = DEFAULT_THETA
    strategy: Strategy = Strategy.BOTH
    domain_allowlist: frozenset[str] = DEFAULT_ALLOWLIST
    language: str | None = "en"
    dedup_enabled: bool = True
    drop_text_evidence: bool = False
    drop_image_evidence: bool = False
    disable_domain_filter: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "domain_allowlist", frozenset(d.strip().lower() for d in self.domain_allowlist))


def _partition(
    candidates: Sequence[EvidenceCandidate],
    stage: str,
    verdict: Callable[[EvidenceCandidate], tuple[bool, Any]],
) -> Stage:
    kept: list[EvidenceCandidate] = []
    trace = FilterTrace()
    for cand in candidates:
        ok, value = verdict(cand)
        if ok:
            kept.append(cand)
            trace.entries.append(TraceEntry(cand.id, True, None, value))
        else:
            trace.entries.append(TraceEntry(cand.id, False, stage, value))
    return kept, trace


def drop_by_origin(
    candidates: Sequence[EvidenceCandidate], drop_text: bool = False, drop_image: bool = False
) -> Stage:
    dropped = {o for o, flag in ((Origin.TEXT_SEARCH, drop_text), (Origin.IMAGE_SEARCH, drop_image)) if flag}
    return _partition(candidates, "ablation", lambda c: (c.origin not in dropped, c.origin.value))


def filter_by_similarity(candidates: Sequence[EvidenceCandidate], theta: float = DEFAULT_THETA) -> Stage:
    """Keep a candidate when any of its modality scores is at least ``theta``."""

    def verdict(c: EvidenceCandidate) -> tuple[bool, float]:
        if c.scores is None:
            raise UnscoredCandidate(f"candidate {c.id} has no similarity scores")
        best = c.scores.best()
        return best >= theta, best

    return _partition(candidates, "similarity", verdict)


def filter_by_domain(candidates: Sequence[EvidenceCandidate], allowlist: Iterable[str]) -> Stage:
    allowed = frozenset(d.strip().lower() for d in allowlist)
    if not allowed:
        raise EmptyAllowlist("domain filter enabled with an empty allowlist")
    return _partition(candidates, "domain", lambda c: (c.domain in allowed, c.domain))


def filter_by_language(
    candidates: Sequence[EvidenceCandidate],
    language: str = "en",
    detector: Callable[[str | None], str | None] = detect_language,
) -> Stage:
    def verdict(c: EvidenceCandidate) -> tuple[bool, str | None]:
        if c.text is None:
            return True, None
        try:
            found = detector(c.text)
        except Exception:  # a broken detector must not starve the reasoner
            return True, "detector-error"
        if found is None:
            return True, None
        return matches(found, language), found

    return _partition(candidates, "language", verdict)


_SPACE = re.compile(r"\s+")


def normalize_title(title: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    stripped = "".join(ch for ch in title.lower() if not unicodedata.category(ch).startswith("P"))
    return _SPACE.sub(" ", stripped).strip()


def dedup_key(c: EvidenceCandidate) -> tuple[str, str] | None:
    if c.title is None:
        return None
    norm = normalize_title(c.title)
    return (c.domain, norm) if norm else None


def deduplicate(candidates: Sequence[EvidenceCandidate]) -> Stage:
    """First candidate per (domain, normalized title) wins; untitled ones always pass."""
    seen: dict[tuple[str, str], str] = {}

    def verdict(c: EvidenceCandidate) -> tuple[bool, str | None]:
        key = dedup_key(c)
        if key is None:
            return True, None
        if key in seen:
            return False, seen[key]
        seen[key] = c.id
        return True, None

    return _partition(candidates, "dedup", verdict)


def run_filter_module(
    candidates: Sequence[EvidenceCandidate],
    config: FilterConfig = FilterConfig(),
    detector: Callable[[str | None], str | None] = detect_language,
) -> Stage:
    kept, trace = drop_by_origin(candidates, config.drop_text_evidence, config.drop_image_evidence)
    stages: list[Callable[[list[EvidenceCandidate]], Stage]] = []
    if config.strategy is not Strategy.DOMAIN_ONLY:
        stages.append(lambda xs: filter_by_similarity(xs, config.theta))
    if config.strategy is not Strategy.SIMILARITY_ONLY and not config.disable_domain_filter:
        stages.append(lambda xs: filter_by_domain(xs, config.domain_allowlist))
    if config.language:
        stages.append(lambda xs: filter_by_language(xs, config.language, detector))  # type: ignore[arg-type]
    if config.dedup_enabled:
        stages.append(deduplicate)
    for stage in stages:
        kept, later = stage(kept)
        trace = trace.then(later)
    return kept, trace


def load_allowlist(path: str | Path) -> frozenset[str]:
    domains = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            domains.add(line)
    return frozenset(domains)


class EvidenceFilter(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`run_filter_module`.

    Stateless: ``fit`` only validates parameters. ``transform`` maps a list
    of scored candidates to the survivors; :meth:`filter` also returns the
    trace.
    """

    def __init__(
        self,
        theta: float = DEFAULT_THETA,
        strategy: str = "both",
        domain_allowlist: Iterable[str] | None = None,
        language: str | None = "en",
        dedup_enabled: bool = True,
        drop_text_evidence: bool = False,
        drop_image_evidence: bool = False,
        disable_domain_filter: bool = False,
    ) -> None:
        self.theta = theta
        self.strategy = strategy
        self.domain_allowlist = domain_allowlist
        self.language = language
        self.dedup_enabled = dedup_enabled
        self.drop_text_evidence = drop_text_evidence
        self.drop_image_evidence = drop_image_evidence
        self.disable_domain_filter = disable_domain_filter

    def config(self) -> FilterConfig:
        return FilterConfig(
            theta=self.theta,
            strategy=Strategy(self.strategy),
            domain_allowlist=DEFAULT_ALLOWLIST if self.domain_allowlist is None else frozenset(self.domain_allowlist),
            language=self.language,
            dedup_enabled=self.dedup_enabled,
            drop_text_evidence=self.drop_text_evidence,
            drop_image_evidence=self.drop_image_evidence,
            disable_domain_filter=self.disable_domain_filter,
        )

    def fit(self, X: Any = None, y: Any = None) -> "EvidenceFilter":
        self.config()
        return self

    def filter(self, X: Sequence[EvidenceCandidate]) -> Stage:
        return run_filter_module(X, self.config())

    def transform(self, X: Sequence[EvidenceCandidate]) -> list[EvidenceCandidate]:
        return self.filter(X)[0]
