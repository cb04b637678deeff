"""Dataset loading, accuracy metrics and benchmark reports."""

from __future__ import annotations

import json
import os
import re
import statistics
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

from .cache import sha256_hex
from .domain import ClaimPair
from .errors import DatasetMalformed, DuplicateId, MissingPrediction, ReportIO


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    image_path: Path
    caption: str
    ooc: bool

    def to_claim(self) -> ClaimPair:
        return ClaimPair(self.id, str(self.image_path), self.caption, self.ooc)


def load_dataset(path: str | os.PathLike[str], check_images: bool = True) -> list[DatasetRecord]:
    """Read a JSON-lines dataset of ``{"id", "image_path", "caption", "ooc"}`` records.

    Relative image paths resolve against the dataset file's directory.
    Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetMalformed(f"{path}: {exc}") from exc
    records: list[DatasetRecord] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        locus = f"{path.name}:{lineno}"
        try:
            doc = json.loads(line)
        except ValueError as exc:
            raise DatasetMalformed(f"{locus}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise DatasetMalformed(f"{locus}: record is not an object")
        rid = doc.get("id")
        if isinstance(rid, int) and not isinstance(rid, bool):
            rid = str(rid)
        if not isinstance(rid, str) or not rid:
            raise DatasetMalformed(f"{locus}: missing or empty 'id'")
        locus = f"{locus} (id {rid!r})"
        caption = doc.get("caption")
        if not isinstance(caption, str) or not caption.strip():
            raise DatasetMalformed(f"{locus}: missing or empty 'caption'")
        image = doc.get("image_path")
        if not isinstance(image, str) or not image:
            raise DatasetMalformed(f"{locus}: missing 'image_path'")
        ooc = doc.get("ooc")
        if not isinstance(ooc, bool):
            raise DatasetMalformed(f"{locus}: 'ooc' must be true or false")
        if rid in seen:
            raise DuplicateId(f"{locus}: id already used on line {seen[rid]}")
        seen[rid] = lineno
        image_path = Path(image) if Path(image).is_absolute() else path.parent / image
        if check_images and not image_path.is_file():
            raise DatasetMalformed(f"{locus}: image not found: {image}")
        records.append(DatasetRecord(rid, image_path, caption, ooc))
    return records


@dataclass(frozen=True)
class Metrics:
    n_ooc: int
    n_nooc: int
    correct_ooc: int
    correct_nooc: int
    n_failed: int = 0

    @property
    def n_total(self) -> int:
        return self.n_ooc + self.n_nooc

    @property
    def acc_all(self) -> Fraction | None:
        return Fraction(self.correct_ooc + self.correct_nooc, self.n_total) if self.n_total else None

    @property
    def acc_ooc(self) -> Fraction | None:
        return Fraction(self.correct_ooc, self.n_ooc) if self.n_ooc else None

    @property
    def acc_nooc(self) -> Fraction | None:
        return Fraction(self.correct_nooc, self.n_nooc) if self.n_nooc else None

    def to_dict(self) -> dict[str, Any]:
        def r(x: Fraction | None) -> float | None:
            return None if x is None else round(float(x), 4)

        return {
            "n_total": self.n_total,
            "n_ooc": self.n_ooc,
            "n_nooc": self.n_nooc,
            "correct_ooc": self.correct_ooc,
            "correct_nooc": self.correct_nooc,
            "n_failed": self.n_failed,
            "acc_all": r(self.acc_all),
            "acc_ooc": r(self.acc_ooc),
            "acc_nooc": r(self.acc_nooc),
        }

    def summary_line(self) -> str:
        def pct(x: Fraction | None) -> str:
            return "n/a" if x is None else f"{float(x) * 100:.2f}"

        return f"all={pct(self.acc_all)} ooc={pct(self.acc_ooc)} nooc={pct(self.acc_nooc)} n={self.n_total}"


def evaluate(predictions: Mapping[str, bool | None], gold: Mapping[str, bool]) -> Metrics:
    """Count accuracy per class. A ``None`` prediction is a failed sample and scores as wrong."""
    missing = [k for k in gold if k not in predictions]
    if missing:
        raise MissingPrediction(f"no prediction for {len(missing)} sample(s), e.g. {missing[:3]}")
    n_ooc = n_nooc = c_ooc = c_nooc = failed = 0
    for sid, truth in gold.items():
        pred = predictions[sid]
        if pred is None:
            failed += 1
        if truth:
            n_ooc += 1
            c_ooc += pred is True
        else:
            n_nooc += 1
            c_nooc += pred is False
    return Metrics(n_ooc, n_nooc, c_ooc, c_nooc, failed)


@dataclass
class SampleRow:
    id: str
    gold: bool
    predicted: bool | None = None
    confidence: int | None = None
    error: dict[str, str] | None = None
    trace_path: str | None = None
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def correct(self) -> bool:
        return self.predicted is not None and self.predicted == self.gold

    def to_dict(self) -> dict[str, Any]:
        def label(x: bool | None) -> str | None:
            return None if x is None else ("OOC" if x else "NOOC")

        return {
            "id": self.id,
            "gold": label(self.gold),
            "predicted": label(self.predicted),
            "correct": self.correct,
            "confidence": self.confidence,
            "error": self.error,
            "trace": self.trace_path,
        }


@dataclass
class EvalReport:
    metrics: Metrics
    per_sample: list[SampleRow]
    config_fingerprint: str

    def _mean(self, key: str) -> float | None:
        values = [r.timings[key] for r in self.per_sample if key in r.timings]
        return statistics.fmean(values) if values else None

    @property
    def mean_latency_retrieval(self) -> float | None:
        return self._mean("retrieval")

    @property
    def mean_latency_reasoning(self) -> float | None:
        return self._mean("reasoning")

    @property
    def mean_latency_overhead(self) -> float | None:
        return self._mean("overhead")

    def median_overhead(self) -> float | None:
        values = [r.timings["overhead"] for r in self.per_sample if "overhead" in r.timings]
        return statistics.median(values) if values else None

    def to_dict(self) -> dict[str, Any]:
        """Deterministic part of the report: no wall-clock values."""
        return {
            "config_fingerprint": self.config_fingerprint,
            "metrics": self.metrics.to_dict(),
            "per_sample": [r.to_dict() for r in sorted(self.per_sample, key=lambda r: r.id)],
        }

    def timings_dict(self) -> dict[str, Any]:
        return {
            "mean_latency_retrieval": self.mean_latency_retrieval,
            "mean_latency_reasoning": self.mean_latency_reasoning,
            "mean_latency_overhead": self.mean_latency_overhead,
            "per_sample": {r.id: r.timings for r in sorted(self.per_sample, key=lambda r: r.id)},
        }

    def summary_line(self) -> str:
        return self.metrics.summary_line()


def dumps(obj: Any) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


def write_atomic(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    except OSError as exc:
        raise ReportIO(f"cannot write {path}: {exc}") from exc


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def trace_filename(sample_id: str) -> str:
    safe = _UNSAFE.sub("_", sample_id)
    if safe != sample_id or safe.startswith("."):
        safe = f"{safe}-{sha256_hex(sample_id.encode('utf-8'))[:8]}"
    return f"{safe}.json"


def write_report(report: EvalReport, report_dir: str | os.PathLike[str]) -> Path:
    """Write ``report.json`` (deterministic) and ``timings.json`` into ``report_dir``."""
    out = Path(report_dir)
    write_atomic(out / "timings.json", dumps(report.timings_dict()))
    write_atomic(out / "report.json", dumps(report.to_dict()))
    return out / "report.json"


def gold_of(records: Iterable[DatasetRecord]) -> dict[str, bool]:
    return {r.id: r.ooc for r in records}
