from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest

from oocverify.domain import EvidenceCandidate, Origin, SimilarityScores

FIXTURES = Path(__file__).parent / "fixtures"
SUITE = FIXTURES / "suite"

_acceptance: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, text): numbered exit criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n, text = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        if _acceptance.get(n, ("PASS",))[0] != "FAIL":
            _acceptance[n] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        status, text = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {text}")


def cand(
    cid: str = "c1",
    *,
    origin: Origin = Origin.TEXT_SEARCH,
    domain: str = "bbc.co.uk",
    title: str | None = "A title",
    snippet: str | None = "Flood waters rose overnight",
    image_ref: str | None = None,
    text: float | None = None,
    visual: float | None = None,
) -> EvidenceCandidate:
    scores = None if text is None and visual is None else SimilarityScores(text, visual)
    return EvidenceCandidate(
        id=cid,
        origin=origin,
        source_url=f"https://{domain}/{cid}",
        domain=domain,
        title=title,
        snippet=snippet,
        image_ref=image_ref,
        scores=scores,
    )


@pytest.fixture
def suite(tmp_path: Path) -> Path:
    """Writable copy of the fixture suite (its golden files included)."""
    dst = tmp_path / "suite"
    shutil.copytree(SUITE, dst)
    return dst


@pytest.fixture
def write_json():
    def _write(path: Path, doc) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path

    return _write
