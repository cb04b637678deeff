"""Content-addressed store of raw provider responses.

Entries live at ``<root>/<aa>/<bb>/<digest>.entry`` where ``digest`` is the
SHA-256 of the key. Each file holds one JSON header line followed by the raw
response body. Writes go to a temporary file in the target directory and are
published with ``os.replace``, so readers only ever see complete entries.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tarfile
import tempfile
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator

from .domain import RequestKind, RetrievalRequest
from .errors import CacheMiss, StoreIO

_TEXT_KINDS = {RequestKind.TEXT_QUERY, RequestKind.TEXT_EMBEDDING}


def normalize_text(text: str) -> str:
    """Collapse internal whitespace runs and strip the ends."""
    return " ".join(text.split())


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class CacheKey:
    provider_id: str
    request_kind: RequestKind
    payload_digest: str

    @property
    def digest(self) -> str:
        material = "\x1f".join((self.provider_id, self.request_kind.value, self.payload_digest))
        return sha256_hex(material.encode("utf-8"))

    def __str__(self) -> str:
        return f"{self.provider_id}/{self.request_kind.value}/{self.digest[:16]}"

    def to_dict(self) -> dict[str, str]:
        return {
            "provider_id": self.provider_id,
            "request_kind": self.request_kind.value,
            "payload_digest": self.payload_digest,
            "digest": self.digest,
        }


def make_key(provider_id: str, kind: RequestKind, payload: str | bytes) -> CacheKey:
    if isinstance(payload, bytes):
        digest = sha256_hex(payload)
    else:
        norm = normalize_text(payload) if kind in _TEXT_KINDS else payload.strip().lower()
        digest = sha256_hex(norm.encode("utf-8"))
    return CacheKey(provider_id, kind, digest)


def cache_key(request: RetrievalRequest, provider_id: str) -> CacheKey:
    # limit is deliberately not part of the key; results are truncated after lookup
    return make_key(provider_id, request.kind, request.payload)


@dataclass(frozen=True)
class CacheEntry:
    key: CacheKey
    stored_at: str
    body: bytes


class EvidenceCache:
    def __init__(self, root: str | os.PathLike[str]) -> None:
        self.root = Path(root)

    def path_for(self, key: CacheKey) -> Path:
        d = key.digest
        return self.root / d[:2] / d[2:4] / f"{d}.entry"

    def get(self, key: CacheKey) -> CacheEntry | None:
        path = self.path_for(key)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise StoreIO(f"cannot read {path}: {exc}") from exc
        header, body = _split_entry(raw, path)
        return CacheEntry(key=key, stored_at=header["stored_at"], body=body)

    def put(self, key: CacheKey, body: bytes) -> None:
        path = self.path_for(key)
        header = {**key.to_dict(), "stored_at": datetime.now(timezone.utc).isoformat()}
        data = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + body
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".entry")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, path)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise
        except OSError as exc:
            raise StoreIO(f"cannot write {path}: {exc}") from exc

    def entries(self) -> Iterator[tuple[dict[str, str], int]]:
        """Yield ``(header, body_size)`` for every published entry, sorted by digest."""
        if not self.root.exists():
            return
        for path in sorted(self.root.glob("*/*/*.entry")):
            if path.name.startswith(".tmp-"):
                continue
            raw = path.read_bytes()
            header, body = _split_entry(raw, path)
            yield header, len(body)

    def clear(self) -> int:
        n = 0
        if not self.root.exists():
            return 0
        for sub in sorted(self.root.iterdir()):
            if sub.is_dir() and len(sub.name) == 2:
                n += sum(1 for _ in sub.glob("*/*.entry"))
                shutil.rmtree(sub)
        return n

    def export(self, tarball: str | os.PathLike[str]) -> int:
        n = 0
        with tarfile.open(tarball, "w:gz") as tar:
            for path in sorted(self.root.glob("*/*/*.entry")):
                if path.name.startswith(".tmp-"):
                    continue
                tar.add(path, arcname=str(path.relative_to(self.root)))
                n += 1
        return n

    def stats(self) -> dict[str, int]:
        count = size = 0
        for _, body_size in self.entries():
            count += 1
            size += body_size
        return {"entries": count, "bytes": size}


def _split_entry(raw: bytes, path: Path) -> tuple[dict[str, str], bytes]:
    head, sep, body = raw.partition(b"\n")
    try:
        if not sep:
            raise ValueError("missing header separator")
        return json.loads(head), body
    except ValueError as exc:
        raise StoreIO(f"corrupt cache entry {path}: {exc}") from exc


class Replay:
    """Cache policy wrapped around every provider call.

    With a cache, hits are served locally and misses are stored after the
    provider answers. ``offline=True`` turns a miss into :class:`CacheMiss`
    without ever invoking the provider.
    """

    def __init__(self, cache: EvidenceCache | None = None, offline: bool = False) -> None:
        self.cache = cache
        self.offline = offline
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def fetch(self, key: CacheKey, produce: Callable[[], bytes]) -> bytes:
        if self.cache is not None:
            entry = self.cache.get(key)
            if entry is not None:
                with self._lock:
                    self.hits += 1
                return entry.body
        with self._lock:
            self.misses += 1
        if self.offline:
            raise CacheMiss(key)
        body = produce()
        if self.cache is not None:
            self.cache.put(key, body)
        return body
