"""Text and reverse-image evidence retrieval behind pluggable search adapters."""

from __future__ import annotations

import abc
import base64
import functools
import ipaddress
import json
import logging
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping
from urllib.parse import urlsplit

import httpx
from publicsuffixlist import PublicSuffixList

from ._rest import Shared, Throttle, post_json
from .cache import Replay, cache_key, normalize_text, sha256_hex
from .clock import provider_call
from .domain import ClaimPair, EvidenceCandidate, Origin, RequestKind, RetrievalRequest
from .errors import ImageUnreadable, MalformedResponse, ProviderUnavailable

log = logging.getLogger(__name__)

DEFAULT_LIMIT = 10

_KNOWN_FIELDS = {"url", "title", "snippet", "image_url", "published_at", "language"}


@functools.lru_cache(maxsize=1)
def _psl() -> PublicSuffixList:
    return PublicSuffixList()


def registrable_domain(url: str) -> str:
    """Lowercased registrable domain (eTLD+1) of ``url``.

    Hosts that are themselves public suffixes, single labels or IP literals
    are returned unchanged (lowercased).
    """
    host = urlsplit(url if "//" in url else f"//{url}").hostname
    if not host:
        raise MalformedResponse(f"URL has no host: {url!r}")
    host = host.rstrip(".").lower()
    try:
        ipaddress.ip_address(host)
        return host
    except ValueError:
        pass
    return _psl().privatesuffix(host) or host


def _opt_text(value: Any) -> str | None:
    if value is None:
        return None
    text = normalize_text(str(value))
    return text or None


def _timestamp(value: Any) -> str | None:
    text = _opt_text(value)
    if text is None:
        return None
    try:
        return datetime.fromisoformat(text.replace("Z", "+00:00")).isoformat()
    except ValueError:
        return None


def normalize_record(raw: Mapping[str, Any], origin: Origin, candidate_id: str = "") -> EvidenceCandidate:
    """Map one provider record onto an :class:`EvidenceCandidate`.

    Blank optional fields become ``None``. A record with a title but neither
    snippet nor image uses the title as its snippet; a record with no usable
    content at all is rejected.
    """
    if not isinstance(raw, Mapping):
        raise MalformedResponse(f"record is not an object: {raw!r}")
    url = _opt_text(raw.get("url"))
    if url is None:
        raise MalformedResponse(f"record without url: {dict(raw)!r}")
    title = _opt_text(raw.get("title"))
    snippet = _opt_text(raw.get("snippet"))
    image_ref = _opt_text(raw.get("image_url"))
    if snippet is None and image_ref is None:
        if title is None:
            raise MalformedResponse(f"record {url!r} has no title, snippet or image")
        snippet = title
    meta = {k: v for k, v in raw.items() if k not in _KNOWN_FIELDS}
    published = _timestamp(raw.get("published_at"))
    if published is None and _opt_text(raw.get("published_at")) is not None:
        meta["published_at_raw"] = raw.get("published_at")
    return EvidenceCandidate(
        id=candidate_id or sha256_hex(url.encode("utf-8"))[:12],
        origin=origin,
        source_url=url,
        domain=registrable_domain(url),
        title=title,
        snippet=snippet,
        image_ref=image_ref,
        published_at=published,
        language=_opt_text(raw.get("language")),
        raw_meta=meta,
    )


def parse_search_response(body: bytes) -> list[Mapping[str, Any]]:
    try:
        doc = json.loads(body)
    except ValueError as exc:
        raise MalformedResponse(f"search response is not JSON: {exc}") from exc
    records = doc.get("records") if isinstance(doc, dict) else None
    if not isinstance(records, list):
        raise MalformedResponse("search response lacks a 'records' list")
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise MalformedResponse(f"records[{i}] is not an object")
        if not _opt_text(rec.get("url")):
            raise MalformedResponse(f"records[{i}] has no url")
    return records


class SearchProvider(abc.ABC, Shared):
    """Base class for search adapters.

    :meth:`search` returns the raw response body. Every call goes through
    the adapter's :class:`~oocverify.cache.Replay`, which serves cached
    bodies and enforces offline mode.
    """

    def __init__(self, provider_id: str, *, replay: Replay | None = None, max_concurrency: int = 4) -> None:
        self.provider_id = provider_id
        self.replay = replay or Replay()
        self.throttle = Throttle(max_concurrency)

    def search(self, request: RetrievalRequest, content: bytes | None = None) -> bytes:
        key = cache_key(request, self.provider_id)

        def produce() -> bytes:
            with self.throttle:
                return self._fetch(request, content)

        with provider_call("retrieval"):
            return self.replay.fetch(key, produce)

    @abc.abstractmethod
    def _fetch(self, request: RetrievalRequest, content: bytes | None) -> bytes:
        ...


class FixtureSearchProvider(SearchProvider):
    """Serves canned responses from ``<directory>/<key digest>.json``.

    Every outgoing request is appended to :attr:`requests` so tests can
    inspect exactly what would have been sent.
    """

    def __init__(self, directory: str | Path, provider_id: str = "fixture", **kwargs: Any) -> None:
        super().__init__(provider_id, **kwargs)
        self.directory = Path(directory)
        self.requests: list[RetrievalRequest] = []
        self._lock = threading.Lock()

    def fixture_path(self, request: RetrievalRequest) -> Path:
        return self.directory / f"{cache_key(request, self.provider_id).digest}.json"

    def _fetch(self, request: RetrievalRequest, content: bytes | None) -> bytes:
        with self._lock:
            self.requests.append(request)
        path = self.fixture_path(request)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise ProviderUnavailable(
                f"fixture provider {self.provider_id!r}: no response for {cache_key(request, self.provider_id)}"
            ) from None


class RestSearchProvider(SearchProvider):
    """Generic JSON-over-HTTP search adapter.

    Request body: ``{"kind", "payload", "limit"}`` plus ``image_b64`` for
    reverse-image requests. Response body: ``{"records": [...]}``.
    """

    def __init__(
        self,
        endpoint: str,
        provider_id: str = "rest",
        *,
        token: str | None = None,
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
        **kwargs: Any,
    ) -> None:
        super().__init__(provider_id, **kwargs)
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.transport = transport

    def _fetch(self, request: RetrievalRequest, content: bytes | None) -> bytes:
        body: dict[str, Any] = {"kind": request.kind.value, "payload": request.payload, "limit": request.limit}
        if content is not None:
            body["image_b64"] = base64.b64encode(content).decode("ascii")
        return post_json(self.endpoint, body, token=self.token, timeout=self.timeout, transport=self.transport)


def read_image(ref: str | Path) -> bytes:
    path = Path(str(ref)[len("file://"):] if str(ref).startswith("file://") else ref)
    try:
        return path.read_bytes()
    except OSError as exc:
        raise ImageUnreadable(f"cannot read image {ref}: {exc}") from exc


def _collect(body: bytes, origin: Origin, limit: int, prefix: str) -> list[EvidenceCandidate]:
    out: list[EvidenceCandidate] = []
    for raw in parse_search_response(body):
        if len(out) >= limit:
            break
        try:
            out.append(normalize_record(raw, origin, f"{prefix}{len(out) + 1}"))
        except MalformedResponse as exc:
            log.warning("dropping record: %s", exc)
    return out


def retrieve_text_evidence(claim: ClaimPair, limit: int, provider: SearchProvider) -> list[EvidenceCandidate]:
    if limit < 1:
        raise ValueError("limit must be >= 1")
    request = RetrievalRequest(RequestKind.TEXT_QUERY, normalize_text(claim.caption), limit)
    return _collect(provider.search(request), Origin.TEXT_SEARCH, limit, "t")


def retrieve_visual_evidence(
    claim: ClaimPair, limit: int, provider: SearchProvider, image: bytes | None = None
) -> list[EvidenceCandidate]:
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if image is None:
        image = read_image(claim.image_path)
    request = RetrievalRequest(RequestKind.REVERSE_IMAGE, sha256_hex(image), limit)
    return _collect(provider.search(request, image), Origin.IMAGE_SEARCH, limit, "i")
