"""Shared HTTP plumbing for the generic REST adapters."""

from __future__ import annotations

import json
import threading
from typing import Any

import httpx

from .errors import ProviderUnavailable


class Throttle:
    """Caps the number of in-flight outbound calls of one adapter."""

    def __init__(self, max_concurrency: int = 4) -> None:
        if max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        self.max_concurrency = max_concurrency
        self._sem = threading.BoundedSemaphore(max_concurrency)

    def __enter__(self) -> "Throttle":
        self._sem.acquire()
        return self

    def __exit__(self, *exc: object) -> None:
        self._sem.release()


def post_json(
    endpoint: str,
    body: dict[str, Any],
    *,
    token: str | None = None,
    timeout: float = 30.0,
    transport: httpx.BaseTransport | None = None,
) -> bytes:
    headers = {"content-type": "application/json"}
    if token:
        headers["authorization"] = f"Bearer {token}"
    payload = json.dumps(body, sort_keys=True, ensure_ascii=False).encode("utf-8")
    try:
        with httpx.Client(timeout=timeout, transport=transport) as client:
            resp = client.post(endpoint, content=payload, headers=headers)
    except httpx.HTTPError as exc:
        raise ProviderUnavailable(f"{endpoint}: {exc.__class__.__name__}: {exc}") from exc
    if resp.status_code >= 400:
        raise ProviderUnavailable(f"{endpoint}: HTTP {resp.status_code}")
    return resp.content


class Shared:
    """Adapters are shared clients; ``sklearn.base.clone`` must not copy them."""

    def __deepcopy__(self, memo: dict[int, Any]) -> "Shared":
        return self
