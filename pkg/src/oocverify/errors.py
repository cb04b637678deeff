"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations

from typing import Any


class OOCError(Exception):
    """Base class for all pipeline errors.

    ``code`` is the stable machine-readable name used in reports, CLI
    diagnostics and service error bodies. ``trace`` optionally carries
    whatever partial trace existed when the error was raised.
    """

    code = "EPipeline"

    def __init__(self, message: str, *, trace: Any = None) -> None:
        super().__init__(message)
        self.trace = trace

    def to_dict(self) -> dict[str, str]:
        return {"code": self.code, "message": str(self)}


class ProviderUnavailable(OOCError):
    code = "EProviderUnavailable"


class CacheMiss(ProviderUnavailable):
    """Offline mode found no cache entry for a request."""

    def __init__(self, key: Any) -> None:
        super().__init__(f"offline mode: no cache entry for key {key}")
        self.key = key


class MalformedResponse(OOCError):
    code = "EMalformedResponse"


class ImageUnreadable(OOCError):
    code = "EImageUnreadable"


class StoreIO(OOCError):
    code = "EStoreIO"


class DimensionMismatch(OOCError):
    code = "EDimensionMismatch"


class ZeroVector(OOCError):
    code = "EZeroVector"


class EmptyText(OOCError):
    code = "EEmptyText"


class UnscoredCandidate(OOCError):
    code = "EUnscoredCandidate"


class EmptyAllowlist(OOCError):
    code = "EEmptyAllowlist"


class ParseError(OOCError):
    """Structured model output could not be turned into an artifact."""

    def __init__(self, message: str, *, span: str | None = None, trace: Any = None) -> None:
        super().__init__(message, trace=trace)
        self.span = span


class ParseFailure(ParseError):
    code = "EParseFailure"


class SchemaViolation(ParseError):
    code = "ESchemaViolation"


class ConfidenceOutOfRange(ParseError):
    code = "EConfidenceOutOfRange"


class UnknownLabel(ParseError):
    code = "EUnknownLabel"


class DatasetMalformed(OOCError):
    code = "EDatasetMalformed"


class DuplicateId(OOCError):
    code = "EDuplicateId"


class MissingPrediction(OOCError):
    code = "EMissingPrediction"


class ReportIO(OOCError):
    code = "EReportIO"


class ConfigInvalid(OOCError):
    code = "EConfigInvalid"

    def __init__(self, key_path: str, message: str) -> None:
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path
