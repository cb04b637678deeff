"""Embedding adapters and cosine scoring of candidates against a claim."""

from __future__ import annotations

import abc
import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import httpx

from ._rest import Shared, Throttle, post_json
from .cache import Replay, make_key, normalize_text, sha256_hex
from .clock import provider_call
from .domain import EvidenceCandidate, RequestKind, SimilarityScores
from .errors import (
    DimensionMismatch,
    EmptyText,
    ImageUnreadable,
    MalformedResponse,
    OOCError,
    ProviderUnavailable,
    ZeroVector,
)


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "EmbeddingVector":
        vals = tuple(float(v) for v in values)
        if not vals:
            raise MalformedResponse("empty embedding vector")
        if not all(math.isfinite(v) for v in vals):
            raise MalformedResponse("embedding contains non-finite values")
        return cls(vals)

    def is_zero(self) -> bool:
        return not any(self.values)


def cosine_similarity(u: EmbeddingVector, v: EmbeddingVector) -> float:
    if u.dim != v.dim:
        raise DimensionMismatch(f"dim {u.dim} != {v.dim}")
    if u.is_zero() or v.is_zero():
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    # fsum keeps results identical across platforms, which golden reports rely on
    dot = math.fsum(a * b for a, b in zip(u.values, v.values))
    nu = math.sqrt(math.fsum(a * a for a in u.values))
    nv = math.sqrt(math.fsum(b * b for b in v.values))
    return max(-1.0, min(1.0, dot / (nu * nv)))


class Embedder(abc.ABC, Shared):
    """Base class for embedding adapters.

    The raw response format is the REST contract ``{"vector": [...], "dim": n}``
    for every adapter, so responses of any kind can share the cache.
    """

    modality: str = "text"

    def __init__(self, provider_id: str, *, replay: Replay | None = None, max_concurrency: int = 4) -> None:
        self.provider_id = provider_id
        self.replay = replay or Replay()
        self.throttle = Throttle(max_concurrency)

    @property
    def _kind(self) -> RequestKind:
        return RequestKind.TEXT_EMBEDDING if self.modality == "text" else RequestKind.IMAGE_EMBEDDING

    def embed(self, payload: str | bytes) -> EmbeddingVector:
        key = make_key(self.provider_id, self._kind, payload)

        def produce() -> bytes:
            with self.throttle:
                return self._fetch(payload)

        with provider_call("retrieval"):
            body = self.replay.fetch(key, produce)
        return parse_embedding_response(body)

    @abc.abstractmethod
    def _fetch(self, payload: str | bytes) -> bytes:
        ...


def parse_embedding_response(body: bytes) -> EmbeddingVector:
    try:
        doc = json.loads(body)
    except ValueError as exc:
        raise MalformedResponse(f"embedding response is not JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("vector"), list):
        raise MalformedResponse("embedding response lacks a 'vector' list")
    try:
        vec = EmbeddingVector.from_values(doc["vector"])
    except (TypeError, ValueError) as exc:
        raise MalformedResponse(f"bad embedding values: {exc}") from exc
    if "dim" in doc and doc["dim"] != vec.dim:
        raise MalformedResponse(f"declared dim {doc['dim']} != vector length {vec.dim}")
    if vec.is_zero():
        raise MalformedResponse("provider returned an all-zero vector")
    return vec


class FixtureEmbedder(Embedder):
    """Looks vectors up in a table: text keyed by normalized text, images by SHA-256."""

    def __init__(
        self,
        table: dict[str, Sequence[float]],
        modality: str = "text",
        provider_id: str = "fixture",
        **kwargs: Any,
    ) -> None:
        super().__init__(provider_id, **kwargs)
        self.modality = modality
        if modality == "text":
            self.table = {normalize_text(k): list(v) for k, v in table.items()}
        else:
            self.table = {k.lower(): list(v) for k, v in table.items()}

    @classmethod
    def from_file(cls, path: str | Path, modality: str, **kwargs: Any) -> "FixtureEmbedder":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc.get(modality, {}), modality, **kwargs)

    def _fetch(self, payload: str | bytes) -> bytes:
        lookup = sha256_hex(payload) if isinstance(payload, bytes) else normalize_text(payload)
        try:
            vector = self.table[lookup]
        except KeyError:
            raise ProviderUnavailable(
                f"fixture embedder {self.provider_id!r}: no {self.modality} vector for {lookup[:60]!r}"
            ) from None
        return json.dumps({"vector": vector, "dim": len(vector)}).encode("utf-8")


class RestEmbedder(Embedder):
    """Request ``{"modality", "payload"}`` (images base64-encoded), response ``{"vector", "dim"}``."""

    def __init__(
        self,
        endpoint: str,
        modality: str = "text",
        provider_id: str = "rest",
        *,
        token: str | None = None,
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
        **kwargs: Any,
    ) -> None:
        super().__init__(provider_id, **kwargs)
        self.modality = modality
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.transport = transport

    def _fetch(self, payload: str | bytes) -> bytes:
        content = base64.b64encode(payload).decode("ascii") if isinstance(payload, bytes) else payload
        body = {"modality": self.modality, "payload": content}
        return post_json(self.endpoint, body, token=self.token, timeout=self.timeout, transport=self.transport)


def embed_text(text: str, provider: Embedder) -> EmbeddingVector:
    if not text or not text.strip():
        raise EmptyText("cannot embed empty text")
    return provider.embed(normalize_text(text))


def embed_image(image: bytes, provider: Embedder) -> EmbeddingVector:
    if not image:
        raise ImageUnreadable("empty image payload")
    return provider.embed(image)


class ImageLoader(Shared):
    """Resolves candidate image references to bytes.

    Relative paths are taken from ``base_dir``; ``http(s)`` thumbnails are
    fetched once and kept in the cache like any other provider response.
    """

    def __init__(
        self,
        base_dir: str | Path | None = None,
        *,
        replay: Replay | None = None,
        timeout: float = 15.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.base_dir = Path(base_dir) if base_dir is not None else None
        self.replay = replay or Replay()
        self.timeout = timeout
        self.transport = transport

    def load(self, ref: str) -> bytes:
        if ref.startswith(("http://", "https://")):
            return self._fetch_remote(ref)
        path = Path(ref[len("file://"):] if ref.startswith("file://") else ref)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        try:
            return path.read_bytes()
        except OSError as exc:
            raise ImageUnreadable(f"cannot read image {ref}: {exc}") from exc

    def _fetch_remote(self, url: str) -> bytes:
        def produce() -> bytes:
            try:
                with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                    resp = client.get(url)
            except httpx.HTTPError as exc:
                raise ImageUnreadable(f"cannot fetch {url}: {exc}") from exc
            if resp.status_code >= 400:
                raise ImageUnreadable(f"cannot fetch {url}: HTTP {resp.status_code}")
            return resp.content

        with provider_call("retrieval"):
            return self.replay.fetch(make_key("thumbnail", RequestKind.IMAGE_FETCH, url.strip()), produce)


def score_candidate(
    claim_text_emb: EmbeddingVector,
    claim_img_emb: EmbeddingVector | None,
    candidate: EvidenceCandidate,
    text_embedder: Embedder,
    image_embedder: Embedder | None = None,
    image_loader: ImageLoader | None = None,
    warnings: list[str] | None = None,
) -> SimilarityScores:
    """Cosine scores of one candidate against the claim's embeddings.

    A modality that cannot be scored is left absent and a warning is
    appended to ``warnings``. If neither modality yields a score, the last
    error is raised.
    """
    text_sim = visual_sim = None
    last_error: OOCError | None = None
    note = warnings.append if warnings is not None else (lambda _msg: None)

    if candidate.text is not None:
        try:
            text_sim = cosine_similarity(claim_text_emb, embed_text(candidate.text, text_embedder))
        except OOCError as exc:
            last_error = exc
            note(f"{candidate.id}: text score unavailable ({exc.code}: {exc})")

    if candidate.image_ref is not None and claim_img_emb is not None and image_embedder is not None:
        try:
            image = (image_loader or ImageLoader()).load(candidate.image_ref)
            visual_sim = cosine_similarity(claim_img_emb, embed_image(image, image_embedder))
        except OOCError as exc:
            last_error = exc
            note(f"{candidate.id}: visual score unavailable ({exc.code}: {exc})")

    if text_sim is None and visual_sim is None:
        if last_error is not None:
            raise last_error
        raise ImageUnreadable(f"{candidate.id}: no scorable modality")
    return SimilarityScores(text_sim=text_sim, visual_sim=visual_sim)
