"""End-to-end detector: retrieval, scoring, filtering, ranking, two-stage reasoning."""

from __future__ import annotations

import contextvars
import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .cache import sha256_hex
from .clock import ProviderClock
from .domain import ClaimPair, EvidenceCandidate
from .errors import ImageUnreadable, OOCError
from .evaluation import DatasetRecord, EvalReport, SampleRow, dumps, evaluate, trace_filename, write_atomic, write_report
from .filtering import (
    DEFAULT_ALLOWLIST,
    DEFAULT_THETA,
    FilterConfig,
    FilterTrace,
    Strategy,
    TraceEntry,
    drop_by_origin,
    run_filter_module,
)
from .ranking import DEFAULT_BAND, DEFAULT_TOP_K, rank_candidates, select_top_k
from .reasoning import ChatProvider, FinalVerdict, ReasoningTrace, RetryPolicy, run_two_stage
from .retrieval import DEFAULT_LIMIT, SearchProvider, retrieve_text_evidence, retrieve_visual_evidence
from .similarity import Embedder, EmbeddingVector, ImageLoader, embed_image, embed_text, score_candidate

log = logging.getLogger(__name__)


@dataclass
class Verification:
    claim_id: str
    verdict: FinalVerdict | None = None
    retrieved: list[EvidenceCandidate] = field(default_factory=list)
    scored: list[EvidenceCandidate] = field(default_factory=list)
    submitted: list[EvidenceCandidate] = field(default_factory=list)
    filter_trace: FilterTrace = field(default_factory=FilterTrace)
    reasoning: ReasoningTrace | None = None
    warnings: list[str] = field(default_factory=list)
    error: dict[str, str] | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_trace(self) -> dict[str, Any]:
        """Deterministic per-sample trace (timings are kept out on purpose)."""
        scored = {c.id: c for c in self.scored}
        return {
            "claim_id": self.claim_id,
            "verdict": None if self.verdict is None else self.verdict.to_dict(),
            "error": self.error,
            "warnings": self.warnings,
            "evidence": [scored.get(c.id, c).to_dict() for c in self.retrieved],
            "filter_trace": self.filter_trace.to_list(),
            "submitted": [c.id for c in self.submitted],
            "reasoning": None if self.reasoning is None else self.reasoning.to_dict(),
        }


def _in_context(pool: ThreadPoolExecutor, fn: Any, *args: Any) -> Any:
    return pool.submit(contextvars.copy_context().run, fn, *args)


class OOCDetector(ClassifierMixin, BaseEstimator):
    """Training-free out-of-context detector with a scikit-learn interface.

    ``predict`` maps claims (``ClaimPair`` or ``DatasetRecord``) to booleans,
    ``True`` meaning out of context. ``fit`` learns nothing; it only checks
    the configuration, so the detector slots into pipelines and
    ``cross_val_score`` unchanged. Use :meth:`verify` for the verdict,
    evidence and traces of a single claim.
    """

    def __init__(
        self,
        text_search: SearchProvider | None = None,
        image_search: SearchProvider | None = None,
        text_embedder: Embedder | None = None,
        image_embedder: Embedder | None = None,
        reasoner: ChatProvider | None = None,
        stage2_reasoner: ChatProvider | None = None,
        image_loader: ImageLoader | None = None,
        retrieval_limit: int = DEFAULT_LIMIT,
        theta: float = DEFAULT_THETA,
        strategy: str = "both",
        domain_allowlist: Iterable[str] | None = None,
        language: str | None = "en",
        dedup_enabled: bool = True,
        drop_text_evidence: bool = False,
        drop_image_evidence: bool = False,
        disable_domain_filter: bool = False,
        top_k: int = DEFAULT_TOP_K,
        borderline_band: float = DEFAULT_BAND,
        max_retries: int = 1,
        concurrent_retrieval: bool = True,
    ) -> None:
        self.text_search = text_search
        self.image_search = image_search
        self.text_embedder = text_embedder
        self.image_embedder = image_embedder
        self.reasoner = reasoner
        self.stage2_reasoner = stage2_reasoner
        self.image_loader = image_loader
        self.retrieval_limit = retrieval_limit
        self.theta = theta
        self.strategy = strategy
        self.domain_allowlist = domain_allowlist
        self.language = language
        self.dedup_enabled = dedup_enabled
        self.drop_text_evidence = drop_text_evidence
        self.drop_image_evidence = drop_image_evidence
        self.disable_domain_filter = disable_domain_filter
        self.top_k = top_k
        self.borderline_band = borderline_band
        self.max_retries = max_retries
        self.concurrent_retrieval = concurrent_retrieval

    def __sklearn_is_fitted__(self) -> bool:
        return True

    @property
    def filter_config(self) -> FilterConfig:
        allow = DEFAULT_ALLOWLIST if self.domain_allowlist is None else frozenset(self.domain_allowlist)
        return FilterConfig(
            theta=self.theta,
            strategy=Strategy(self.strategy),
            domain_allowlist=allow,
            language=self.language,
            dedup_enabled=self.dedup_enabled,
            drop_text_evidence=self.drop_text_evidence,
            drop_image_evidence=self.drop_image_evidence,
            disable_domain_filter=self.disable_domain_filter,
        )

    def fit(self, X: Any = None, y: Any = None) -> "OOCDetector":
        self.filter_config  # validates theta / strategy
        if self.top_k < 1 or self.retrieval_limit < 1:
            raise ValueError("top_k and retrieval_limit must be >= 1")
        if self.reasoner is None:
            raise ValueError("a reasoner provider is required")
        self.classes_ = np.array([False, True])
        self.n_trainable_params_ = 0
        return self

    # -- single claim -------------------------------------------------------

    def verify(self, claim: ClaimPair | DatasetRecord, image: bytes | None = None) -> Verification:
        """Run the full pipeline on one claim.

        Raises the first :class:`~oocverify.errors.OOCError`; its ``trace``
        attribute then holds the partial :class:`Verification`.
        """
        if isinstance(claim, DatasetRecord):
            claim = claim.to_claim()
        result = Verification(claim.id)
        clock = ProviderClock()
        start = time.perf_counter()
        try:
            with clock.bind():
                self._verify(claim, image, result)
        except OOCError as exc:
            result.error = exc.to_dict()
            if isinstance(exc.trace, ReasoningTrace):
                result.reasoning = exc.trace
            exc.trace = result
            raise
        finally:
            total = time.perf_counter() - start
            result.timings = {
                "total": total,
                "retrieval": clock.wall("retrieval"),
                "reasoning": clock.wall("reasoning"),
                "overhead": max(0.0, total - clock.wall()),
            }
        return result

    def _verify(self, claim: ClaimPair, image: bytes | None, out: Verification) -> None:
        if self.reasoner is None:
            raise ValueError("a reasoner provider is required")
        if image is None:
            try:
                image = claim.image_path.read_bytes()
            except OSError as exc:
                raise ImageUnreadable(f"cannot read claim image {claim.image_ref}: {exc}") from exc
        config = self.filter_config

        out.retrieved = self._retrieve(claim, image)
        kept, trace = drop_by_origin(out.retrieved, config.drop_text_evidence, config.drop_image_evidence)
        scored, scoring_trace = self._score(claim, image, kept, out.warnings)
        out.scored = scored
        filtered, filter_trace = run_filter_module(scored, config)
        out.filter_trace = trace.then(scoring_trace).then(filter_trace)
        out.submitted = select_top_k(rank_candidates(filtered, self.borderline_band), self.top_k)

        reasoning = run_two_stage(
            claim,
            out.submitted,
            self.reasoner,
            self.stage2_reasoner,
            RetryPolicy(max_retries=self.max_retries),
            image=image,
        )
        out.reasoning = reasoning.trace
        out.verdict = reasoning.verdict

    def _retrieve(self, claim: ClaimPair, image: bytes) -> list[EvidenceCandidate]:
        jobs = []
        if self.text_search is not None:
            jobs.append((retrieve_text_evidence, (claim, self.retrieval_limit, self.text_search)))
        if self.image_search is not None:
            jobs.append((retrieve_visual_evidence, (claim, self.retrieval_limit, self.image_search, image)))
        if self.concurrent_retrieval and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
                futures = [_in_context(pool, fn, *args) for fn, args in jobs]
                results = [f.result() for f in futures]
        else:
            results = [fn(*args) for fn, args in jobs]
        return [c for batch in results for c in batch]

    def _score(
        self, claim: ClaimPair, image: bytes, candidates: Sequence[EvidenceCandidate], warnings: list[str]
    ) -> tuple[list[EvidenceCandidate], FilterTrace]:
        trace = FilterTrace()
        if not candidates:
            return [], trace
        if self.text_embedder is None:
            raise ValueError("a text embedder is required to score evidence")
        claim_text = embed_text(claim.caption, self.text_embedder)
        claim_img: EmbeddingVector | None = None
        if self.image_embedder is not None and any(c.image_ref for c in candidates):
            claim_img = embed_image(image, self.image_embedder)
        scored = []
        for cand in candidates:
            try:
                scores = score_candidate(
                    claim_text, claim_img, cand, self.text_embedder, self.image_embedder, self.image_loader, warnings
                )
            except OOCError as exc:
                warnings.append(f"{cand.id}: dropped, no usable score ({exc.code})")
                trace.entries.append(TraceEntry(cand.id, False, "scoring", exc.code))
                continue
            scored.append(dataclasses.replace(cand, scores=scores))
            trace.entries.append(TraceEntry(cand.id, True))
        return scored, trace

    # -- scikit-learn surface ----------------------------------------------

    def predict(self, X: Sequence[ClaimPair | DatasetRecord]) -> np.ndarray:
        return np.array([self.verify(x).verdict.is_ooc for x in X], dtype=bool)  # type: ignore[union-attr]

    def predict_confidence(self, X: Sequence[ClaimPair | DatasetRecord]) -> np.ndarray:
        return np.array([self.verify(x).verdict.confidence for x in X], dtype=int)  # type: ignore[union-attr]


def run_benchmark(
    records: Sequence[DatasetRecord],
    detector: OOCDetector,
    report_dir: str | Path | None = None,
    config_fingerprint: str = "",
    workers: int = 1,
) -> EvalReport:
    """Run every record through ``detector`` and score the results.

    A failing sample is recorded with its error and scored as wrong; it
    never stops the run. With ``report_dir``, per-sample traces go to
    ``traces/`` and the report files are written atomically.
    """
    out = Path(report_dir) if report_dir is not None else None

    def one(rec: DatasetRecord) -> SampleRow:
        row = SampleRow(rec.id, rec.ooc)
        try:
            v = detector.verify(rec)
        except OOCError as exc:
            v = exc.trace if isinstance(exc.trace, Verification) else Verification(rec.id, error=exc.to_dict())
        except Exception as exc:  # crash isolation: a bug in one sample must not sink the run
            log.exception("sample %s crashed", rec.id)
            v = Verification(rec.id, error={"code": "EInternal", "message": f"{type(exc).__name__}: {exc}"})
        if v.verdict is not None:
            row.predicted = v.verdict.is_ooc
            row.confidence = v.verdict.confidence
        row.error = v.error
        row.timings = v.timings
        if out is not None:
            name = trace_filename(rec.id)
            write_atomic(out / "traces" / name, dumps(v.to_trace()))
            row.trace_path = f"traces/{name}"
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda r: contextvars.copy_context().run(one, r), records))
    else:
        rows = [one(r) for r in records]
    rows.sort(key=lambda r: r.id)
    metrics = evaluate({r.id: r.predicted for r in rows}, {r.id: r.gold for r in rows})
    report = EvalReport(metrics, rows, config_fingerprint)
    if out is not None:
        write_report(report, out)
    return report


def claim_fingerprint(caption: str, image: bytes) -> str:
    return sha256_hex(caption.encode("utf-8") + b"\x00" + image)[:16]
