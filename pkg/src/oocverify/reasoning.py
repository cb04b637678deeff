"""Two-stage chain-of-thought verification over a multimodal chat provider.

Stage 1 asks the model for a stance on every retrieved evidence item.
Stage 2 shows the model the news image together with the Stage 1 review and
asks for the final label and a 0-10 confidence. Both stages must answer
with a fenced JSON block; the exact shapes are documented in the README and
enforced by :func:`parse_stage1_response` and :func:`parse_stage2_response`.
"""

from __future__ import annotations

import abc
import base64
import enum
import json
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from ._rest import Shared, Throttle, post_json
from .cache import Replay, make_key, sha256_hex
from .clock import provider_call
from .domain import ClaimPair, EvidenceCandidate, RequestKind
from .errors import (
    ConfidenceOutOfRange,
    ImageUnreadable,
    MalformedResponse,
    OOCError,
    ParseError,
    ParseFailure,
    ProviderUnavailable,
    SchemaViolation,
    UnknownLabel,
)
from .prompts import ImagePart, PromptDocument, TextPart, load_template

STAGE1 = "stage1"
STAGE2 = "stage2"

NO_EVIDENCE_NOTE = "No external evidence retrieved for this claim."
NO_EVIDENCE_SUMMARY = (
    "No external evidence was retrieved or none survived filtering; "
    "decide from the image and caption alone."
)
FORMAT_REMINDER = (
    "Your previous answer could not be parsed. Answer again and end with exactly one "
    "fenced ```json block that follows the output format above. Do not add any other JSON."
)


class Stance(str, enum.Enum):
    SUPPORTS = "supports"
    REFUTES = "refutes"
    IRRELEVANT = "irrelevant"


class Label(str, enum.Enum):
    OOC = "OOC"
    NOOC = "NOOC"


@dataclass(frozen=True)
class KeyElements:
    entities: tuple[str, ...] = ()
    time: tuple[str, ...] = ()
    place: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, list[str]]:
        return {"entities": list(self.entities), "time": list(self.time), "place": list(self.place)}


@dataclass(frozen=True)
class CandidateAssessment:
    candidate_id: str
    stance: Stance
    rationale: str
    key_elements: KeyElements = KeyElements()

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.candidate_id,
            "stance": self.stance.value,
            "rationale": self.rationale,
            "key_elements": self.key_elements.to_dict(),
        }


@dataclass(frozen=True)
class Stage1Assessment:
    per_candidate: tuple[CandidateAssessment, ...]
    summary: str

    @property
    def candidate_ids(self) -> list[str]:
        return [a.candidate_id for a in self.per_candidate]

    def to_dict(self) -> dict[str, Any]:
        return {"assessments": [a.to_dict() for a in self.per_candidate], "summary": self.summary}


@dataclass(frozen=True)
class FinalVerdict:
    label: Label
    confidence: int
    explanation: str
    evidence_ids: tuple[str, ...] = ()

    @property
    def is_ooc(self) -> bool:
        return self.label is Label.OOC

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label.value,
            "confidence": self.confidence,
            "explanation": self.explanation,
            "evidence": list(self.evidence_ids),
        }


EMPTY_ASSESSMENT = Stage1Assessment((), NO_EVIDENCE_SUMMARY)


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=False).replace("`", "\\u0060")


def fenced(obj: Any) -> str:
    # backticks only occur inside JSON strings, so escaping them keeps a
    # stray ``` in a rationale from closing the fence early
    body = json.dumps(obj, ensure_ascii=False).replace("`", "\\u0060")
    return "```json\n" + body + "\n```"


def serialize_stage1(assessment: Stage1Assessment) -> str:
    return fenced(assessment.to_dict())


def serialize_verdict(verdict: FinalVerdict) -> str:
    return fenced(verdict.to_dict())


# --- prompt construction ---------------------------------------------------


def candidate_record(c: EvidenceCandidate) -> dict[str, Any]:
    s = c.scores
    return {
        "id": c.id,
        "domain": c.domain,
        "title": c.title,
        "snippet": c.snippet,
        "published_at": c.published_at,
        "text_sim": None if s is None else s.text_sim,
        "visual_sim": None if s is None else s.visual_sim,
    }


def build_stage1_prompt(
    claim: ClaimPair, candidates: Sequence[EvidenceCandidate], template_version: str = "1"
) -> PromptDocument:
    tpl = load_template(STAGE1, template_version)
    records = [candidate_record(c) for c in candidates]
    note = f"{len(records)} evidence item(s), ranked best first." if records else NO_EVIDENCE_NOTE
    system, user = tpl.render(
        caption=claim.caption,
        evidence_note=note,
        record=_dumps({"caption": claim.caption, "candidates": records}),
        ids=", ".join(r["id"] for r in records) or "none",
    )
    return PromptDocument(system, (TextPart(user),), tpl.template_id, tpl.version)


def build_stage2_prompt(
    claim: ClaimPair,
    stage1: Stage1Assessment,
    candidates: Sequence[EvidenceCandidate] = (),
    image: bytes | None = None,
    template_version: str = "1",
) -> PromptDocument:
    """Stage 2 document: the claim image, the caption and the full Stage 1 review.

    ``candidates`` optionally adds source metadata and scores to each
    reviewed item.
    """
    if image is None:
        try:
            image = claim.image_path.read_bytes()
        except OSError as exc:
            raise ImageUnreadable(f"cannot read claim image {claim.image_ref}: {exc}") from exc
    tpl = load_template(STAGE2, template_version)
    by_id = {c.id: c for c in candidates}
    reviewed = []
    for a in stage1.per_candidate:
        entry = a.to_dict()
        if a.candidate_id in by_id:
            rec = candidate_record(by_id[a.candidate_id])
            entry.update(domain=rec["domain"], title=rec["title"],
                         text_sim=rec["text_sim"], visual_sim=rec["visual_sim"])
        reviewed.append(entry)
    if not reviewed:
        note = "No external evidence is available. " + NO_EVIDENCE_SUMMARY
    elif all(a.stance is Stance.IRRELEVANT for a in stage1.per_candidate):
        note = "None of the reviewed evidence bears on the caption; decide from the image and caption alone."
    else:
        note = f"{len(reviewed)} evidence item(s) were reviewed."
    system, user = tpl.render(
        caption=claim.caption,
        stage1_note=note,
        record=_dumps({"caption": claim.caption, "summary": stage1.summary, "assessments": reviewed}),
    )
    parts = (ImagePart(claim.image_ref, sha256_hex(image), image), TextPart(user))
    return PromptDocument(system, parts, tpl.template_id, tpl.version)


# --- response parsing ------------------------------------------------------

_FENCE = re.compile(r"```(?:json|JSON)?[ \t]*\n(.*?)```", re.DOTALL)


def _span(text: str, start: int = 0, width: int = 120) -> str:
    return text[max(0, start - 20): start + width]


def extract_json(text: str) -> Any:
    """Decode the last fenced JSON block, or the whole text if it is bare JSON."""
    if not isinstance(text, str) or not text.strip():
        raise ParseFailure("empty response", span="")
    blocks = _FENCE.findall(text)
    candidate = blocks[-1] if blocks else text.strip()
    try:
        return json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"invalid JSON: {exc.msg} at char {exc.pos}", span=_span(candidate, exc.pos)) from None


def _str(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise SchemaViolation(f"{where} must be a string", span=repr(value)[:120])
    return value


def _str_list(value: Any, where: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaViolation(f"{where} must be a list of strings", span=repr(value)[:120])
    return tuple(value)


def parse_stage1_response(text: str, candidate_ids: Sequence[str] | None = None) -> Stage1Assessment:
    """Parse a Stage 1 answer.

    With ``candidate_ids`` given, the answer must assess exactly those ids
    and the entries are returned in that order.
    """
    doc = extract_json(text)
    if not isinstance(doc, dict):
        raise SchemaViolation("stage 1 output must be a JSON object", span=repr(doc)[:120])
    items = doc.get("assessments")
    if not isinstance(items, list):
        raise SchemaViolation("'assessments' must be a list", span=repr(items)[:120])
    summary = _str(doc.get("summary"), "summary")
    expected = None if candidate_ids is None else list(candidate_ids)
    parsed: dict[str, CandidateAssessment] = {}
    for i, item in enumerate(items):
        where = f"assessments[{i}]"
        if not isinstance(item, dict):
            raise SchemaViolation(f"{where} must be an object", span=repr(item)[:120])
        cid = _str(item.get("id"), f"{where}.id")
        if expected is not None and cid not in expected:
            raise SchemaViolation(f"{where}: unknown candidate id {cid!r}", span=cid)
        if cid in parsed:
            raise SchemaViolation(f"{where}: duplicate candidate id {cid!r}", span=cid)
        raw_stance = _str(item.get("stance"), f"{where}.stance")
        try:
            stance = Stance(raw_stance.strip().lower())
        except ValueError:
            raise SchemaViolation(f"{where}: invalid stance {raw_stance!r}", span=raw_stance) from None
        rationale = _str(item.get("rationale", ""), f"{where}.rationale")
        ke = item.get("key_elements", {})
        if not isinstance(ke, dict):
            raise SchemaViolation(f"{where}.key_elements must be an object", span=repr(ke)[:120])
        elements = KeyElements(
            entities=_str_list(ke.get("entities", []), f"{where}.key_elements.entities"),
            time=_str_list(ke.get("time", []), f"{where}.key_elements.time"),
            place=_str_list(ke.get("place", []), f"{where}.key_elements.place"),
        )
        parsed[cid] = CandidateAssessment(cid, stance, rationale, elements)
    if expected is not None:
        missing = [c for c in expected if c not in parsed]
        if missing:
            raise SchemaViolation(f"no assessment for candidate(s) {missing}", span=", ".join(missing))
        order = expected
    else:
        order = list(parsed)
    return Stage1Assessment(tuple(parsed[c] for c in order), summary)


def parse_stage2_response(text: str, candidate_ids: Iterable[str] | None = None) -> FinalVerdict:
    doc = extract_json(text)
    if not isinstance(doc, dict):
        raise SchemaViolation("stage 2 output must be a JSON object", span=repr(doc)[:120])
    if "label" not in doc:
        raise SchemaViolation("missing 'label'", span=repr(doc)[:120])
    raw_label = doc["label"]
    if not isinstance(raw_label, str):
        raise UnknownLabel(f"label must be OOC or NOOC, got {raw_label!r}", span=repr(raw_label))
    try:
        label = Label(raw_label.strip().upper())
    except ValueError:
        raise UnknownLabel(f"label must be OOC or NOOC, got {raw_label!r}", span=raw_label) from None
    if "confidence" not in doc:
        raise SchemaViolation("missing 'confidence'", span=repr(doc)[:120])
    conf = doc["confidence"]
    if isinstance(conf, bool) or not isinstance(conf, (int, float)):
        raise SchemaViolation(f"confidence must be an integer, got {conf!r}", span=repr(conf))
    if not 0 <= conf <= 10:
        raise ConfidenceOutOfRange(f"confidence {conf!r} outside 0..10", span=repr(conf))
    if not isinstance(conf, int):
        raise SchemaViolation(f"confidence must be an integer, got {conf!r}", span=repr(conf))
    explanation = _str(doc.get("explanation"), "explanation")
    evidence = _str_list(doc.get("evidence", []), "evidence")
    if candidate_ids is not None:
        allowed = set(candidate_ids)
        unknown = [e for e in evidence if e not in allowed]
        if unknown:
            raise SchemaViolation(f"evidence cites unknown candidate id(s) {unknown}", span=", ".join(unknown))
    return FinalVerdict(label, conf, explanation, tuple(dict.fromkeys(evidence)))


# --- chat providers --------------------------------------------------------


def parse_chat_response(body: bytes) -> str:
    try:
        doc = json.loads(body)
    except ValueError as exc:
        raise MalformedResponse(f"chat response is not JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("text"), str):
        raise MalformedResponse("chat response lacks a 'text' string")
    return doc["text"]


class ChatProvider(abc.ABC, Shared):
    """Multimodal chat adapter. Raw responses are ``{"text": ...}`` bodies."""

    def __init__(self, provider_id: str, *, replay: Replay | None = None, max_concurrency: int = 4) -> None:
        self.provider_id = provider_id
        self.replay = replay or Replay()
        self.throttle = Throttle(max_concurrency)
        self.calls = 0

    def complete(self, document: PromptDocument, stage_id: str) -> str:
        key = make_key(self.provider_id, RequestKind.CHAT, stage_id.encode("utf-8") + b"\x00" + document.serialize())

        def produce() -> bytes:
            with self.throttle:
                self.calls += 1
                return self._fetch(document, stage_id)

        with provider_call("reasoning"):
            return parse_chat_response(self.replay.fetch(key, produce))

    @abc.abstractmethod
    def _fetch(self, document: PromptDocument, stage_id: str) -> bytes:
        ...


class ScriptedChat(ChatProvider):
    """Replays canned answers in order, per stage; for tests and demos."""

    def __init__(
        self, responses: Mapping[str, Sequence[str]] | Sequence[str], provider_id: str = "scripted", **kwargs: Any
    ) -> None:
        super().__init__(provider_id, **kwargs)
        if isinstance(responses, Mapping):
            self._queues = {k: deque(v) for k, v in responses.items()}
        else:
            self._queues = {"*": deque(responses)}
        self.documents: list[tuple[str, PromptDocument]] = []

    def _fetch(self, document: PromptDocument, stage_id: str) -> bytes:
        self.documents.append((stage_id, document))
        queue = self._queues.get(stage_id, self._queues.get("*"))
        if not queue:
            raise ProviderUnavailable(f"scripted provider has no answer left for {stage_id}")
        return json.dumps({"text": queue.popleft()}).encode("utf-8")


class RuleChat(ChatProvider):
    """Deterministic stand-in reasoner driven by a lookup table.

    Stage 1 assigns each evidence item the stance listed for its title
    (``irrelevant`` otherwise). Stage 2 returns OOC when refuting items
    outnumber supporting ones, NOOC for the reverse, and otherwise the
    per-caption fallback label (what a model would conclude from the image
    alone). Table format::

        {"stances": {"<title>": "supports|refutes|irrelevant"},
         "fallback": {"<caption>": "OOC|NOOC"},
         "default_label": "NOOC"}
    """

    def __init__(self, table: Mapping[str, Any], provider_id: str = "rule", **kwargs: Any) -> None:
        super().__init__(provider_id, **kwargs)
        self.stances = dict(table.get("stances", {}))
        self.fallback = dict(table.get("fallback", {}))
        self.default_label = table.get("default_label", "NOOC")

    @classmethod
    def from_file(cls, path: str | Path, **kwargs: Any) -> "RuleChat":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), **kwargs)

    def _fetch(self, document: PromptDocument, stage_id: str) -> bytes:
        # the record is the first fenced block; later blocks are format examples
        record = json.loads(_FENCE.findall(document.text)[0])
        if stage_id == STAGE1:
            assessments = [
                {
                    "id": c["id"],
                    "stance": self.stances.get(c.get("title") or "", "irrelevant"),
                    "rationale": f"lookup stance for {c.get('title')!r}",
                    "key_elements": {"entities": [], "time": [], "place": []},
                }
                for c in record["candidates"]
            ]
            text = fenced({"assessments": assessments, "summary": f"{len(assessments)} item(s) reviewed"})
        else:
            items = record["assessments"]
            pro = [a["id"] for a in items if a["stance"] == Stance.SUPPORTS.value]
            con = [a["id"] for a in items if a["stance"] == Stance.REFUTES.value]
            if len(con) != len(pro):
                label = "OOC" if len(con) > len(pro) else "NOOC"
                cited = con if label == "OOC" else pro
                confidence = min(10, 5 + 2 * abs(len(con) - len(pro)))
            else:
                label = self.fallback.get(record["caption"], self.default_label)
                cited, confidence = [], 3
            text = "Decision follows the evidence tally.\n" + fenced(
                {"label": label, "confidence": confidence, "explanation": f"{len(pro)} supporting, {len(con)} refuting", "evidence": cited}
            )
        return json.dumps({"text": text}).encode("utf-8")


class RestChat(ChatProvider):
    """Generic chat endpoint.

    Request ``{"system", "parts": [{"type": "text"|"image", "content"}], "stage_id"}``
    with images base64-encoded; response ``{"text": ...}``.
    """

    def __init__(
        self,
        endpoint: str,
        provider_id: str = "rest",
        *,
        token: str | None = None,
        timeout: float = 120.0,
        image_loader: Callable[[str], bytes] | None = None,
        transport: httpx.BaseTransport | None = None,
        **kwargs: Any,
    ) -> None:
        super().__init__(provider_id, **kwargs)
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.image_loader = image_loader or (lambda ref: Path(ref).read_bytes())
        self.transport = transport

    def _fetch(self, document: PromptDocument, stage_id: str) -> bytes:
        parts = []
        for p in document.parts:
            if isinstance(p, TextPart):
                parts.append({"type": "text", "content": p.content})
            else:
                try:
                    data = p.data if p.data is not None else self.image_loader(p.ref)
                except OSError as exc:
                    raise ImageUnreadable(f"cannot read {p.ref}: {exc}") from exc
                parts.append({"type": "image", "content": base64.b64encode(data).decode("ascii")})
        body = {"system": document.system_text, "parts": parts, "stage_id": stage_id}
        return post_json(self.endpoint, body, token=self.token, timeout=self.timeout, transport=self.transport)


# --- orchestration ---------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 1
    reminder: str = FORMAT_REMINDER


@dataclass
class StageTrace:
    stage_id: str
    prompts: list[str] = field(default_factory=list)
    responses: list[str] = field(default_factory=list)
    retry_count: int = 0
    parsed: dict[str, Any] | None = None
    error: dict[str, str] | None = None
    skipped: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage_id": self.stage_id,
            "skipped": self.skipped,
            "retry_count": self.retry_count,
            "prompts": self.prompts,
            "responses": self.responses,
            "parsed": self.parsed,
            "error": self.error,
        }


@dataclass
class ReasoningTrace:
    stages: list[StageTrace] = field(default_factory=list)

    @property
    def provider_calls(self) -> int:
        return sum(len(s.responses) for s in self.stages)

    def to_dict(self) -> dict[str, Any]:
        return {"stages": [s.to_dict() for s in self.stages]}


def _run_stage(
    provider: ChatProvider,
    document: PromptDocument,
    stage_id: str,
    parse: Callable[[str], Any],
    policy: RetryPolicy,
    trace: ReasoningTrace,
) -> Any:
    st = StageTrace(stage_id)
    trace.stages.append(st)
    doc = document
    attempt = 0
    while True:
        st.prompts.append(doc.serialize().decode("utf-8"))
        try:
            text = provider.complete(doc, stage_id)
        except OOCError as exc:
            st.error = exc.to_dict()
            exc.trace = trace
            raise
        st.responses.append(text)
        try:
            result = parse(text)
        except ParseError as exc:
            st.error = {**exc.to_dict(), "span": exc.span or ""}
            if attempt >= policy.max_retries:
                exc.trace = trace
                raise
            attempt += 1
            st.retry_count = attempt
            doc = document.with_suffix(policy.reminder)
            continue
        st.error = None
        st.parsed = result.to_dict()
        return result


@dataclass
class ReasoningResult:
    verdict: FinalVerdict
    assessment: Stage1Assessment
    trace: ReasoningTrace


def run_two_stage(
    claim: ClaimPair,
    candidates: Sequence[EvidenceCandidate],
    provider: ChatProvider,
    stage2_provider: ChatProvider | None = None,
    policy: RetryPolicy = RetryPolicy(),
    image: bytes | None = None,
) -> ReasoningResult:
    """Stage 1 then Stage 2. Errors carry the partial trace in ``exc.trace``.

    With no candidates, Stage 1 is skipped and Stage 2 receives an explicit
    no-evidence assessment. The label always comes from a parsed provider
    answer; nothing is substituted on failure.
    """
    stage2_provider = stage2_provider or provider
    trace = ReasoningTrace()
    ids = [c.id for c in candidates]
    if candidates:
        doc1 = build_stage1_prompt(claim, candidates)
        assessment = _run_stage(provider, doc1, STAGE1, lambda t: parse_stage1_response(t, ids), policy, trace)
    else:
        assessment = EMPTY_ASSESSMENT
        skipped = StageTrace(STAGE1, skipped=True, parsed=assessment.to_dict())
        trace.stages.append(skipped)
    try:
        doc2 = build_stage2_prompt(claim, assessment, candidates, image=image)
    except OOCError as exc:
        exc.trace = trace
        raise
    verdict = _run_stage(stage2_provider, doc2, STAGE2, lambda t: parse_stage2_response(t, ids), policy, trace)
    return ReasoningResult(verdict, assessment, trace)
