"""Minimal HTTP verification service: ``POST /verify`` and ``GET /health``."""

from __future__ import annotations

import base64
import binascii
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .cache import EvidenceCache
from .domain import ClaimPair
from .errors import ImageUnreadable, OOCError, ParseError, ProviderUnavailable
from .pipeline import OOCDetector, claim_fingerprint


class VerifyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    caption: str = Field(min_length=1)
    image_b64: str | None = None
    image_uri: str | None = None

    @model_validator(mode="after")
    def _one_image(self) -> "VerifyRequest":
        if (self.image_b64 is None) == (self.image_uri is None):
            raise ValueError("exactly one of image_b64 or image_uri is required")
        return self


def _status_for(exc: OOCError) -> int:
    if isinstance(exc, ProviderUnavailable):
        return 503
    if isinstance(exc, ImageUnreadable):
        return 422
    if isinstance(exc, ParseError):
        return 502
    return 500


def _error(status: int, code: str, message: str, **extra: Any) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message, **extra}})


def _probe(provider: Any) -> bool:
    if provider is None:
        return False
    directory = getattr(provider, "directory", None)
    if directory is not None:
        return Path(directory).is_dir()
    endpoint = getattr(provider, "endpoint", None)
    if endpoint is None:
        return True
    import httpx

    try:
        with httpx.Client(timeout=2.0, transport=getattr(provider, "transport", None)) as client:
            return client.get(endpoint).status_code < 500
    except httpx.HTTPError:
        return False


def create_app(detector: OOCDetector, cache: EvidenceCache | None = None, keep_traces: int = 256) -> FastAPI:
    app = FastAPI(title="oocverify", version="0.1.0")
    traces: OrderedDict[str, dict[str, Any]] = OrderedDict()
    lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError) -> JSONResponse:
        err = exc.errors()[0]
        loc = [str(p) for p in err.get("loc", ()) if p != "body"]
        return _error(400, "EBadRequest", err.get("msg", "invalid request"), field=".".join(loc) or None)

    @app.post("/verify")
    def verify(body: VerifyRequest) -> JSONResponse:
        if body.image_b64 is not None:
            try:
                image = base64.b64decode(body.image_b64, validate=True)
            except (binascii.Error, ValueError):
                return _error(400, "EBadRequest", "image_b64 is not valid base64", field="image_b64")
            ref = "upload"
        else:
            ref = body.image_uri  # type: ignore[assignment]
            try:
                image = detector.image_loader.load(ref) if detector.image_loader else Path(ref).read_bytes()
            except (ImageUnreadable, OSError) as exc:
                return _error(422, "EImageUnreadable", str(exc), field="image_uri")
        if not image:
            return _error(400, "EBadRequest", "image is empty", field="image_b64")
        trace_id = claim_fingerprint(body.caption, image)
        claim = ClaimPair(trace_id, ref, body.caption)
        try:
            result = detector.verify(claim, image=image)
        except OOCError as exc:
            if hasattr(exc.trace, "to_trace"):
                with lock:
                    traces[trace_id] = exc.trace.to_trace()
            return _error(_status_for(exc), exc.code, str(exc), trace_id=trace_id)
        with lock:
            traces[trace_id] = result.to_trace()
            while len(traces) > keep_traces:
                traces.popitem(last=False)
        return JSONResponse({**result.verdict.to_dict(), "trace_id": trace_id})  # type: ignore[union-attr]

    @app.get("/trace/{trace_id}")
    def trace(trace_id: str) -> JSONResponse:
        with lock:
            doc = traces.get(trace_id)
        if doc is None:
            return _error(404, "ENotFound", f"no trace {trace_id}")
        return JSONResponse(doc)

    @app.get("/health")
    def health() -> dict[str, Any]:
        slots = ("text_search", "image_search", "text_embedder", "image_embedder", "reasoner")
        reach = {s: _probe(getattr(detector, s)) for s in slots if getattr(detector, s) is not None}
        return {
            "status": "ok" if all(reach.values()) else "degraded",
            "providers": reach,
            "cache": cache.stats() if cache is not None else None,
        }

    return app
