import json

import numpy as np
import pytest
from sklearn.base import clone

from oocverify.config import build_detector, load_config
from oocverify.domain import Origin
from oocverify.errors import ProviderUnavailable
from oocverify.evaluation import load_dataset
from oocverify.pipeline import OOCDetector, run_benchmark


@pytest.fixture
def detector(suite):
    return build_detector(load_config(suite / "config.yaml", environ={}))


@pytest.fixture
def records(suite):
    return load_dataset(suite / "dataset.jsonl")


def test_estimator_surface(detector, records):
    params = detector.get_params()
    assert params["top_k"] == 3 and params["theta"] == 0.7
    other = clone(detector).set_params(top_k=1)
    assert detector.top_k == 3 and other.top_k == 1
    assert other.reasoner is detector.reasoner  # providers are shared, not copied
    sub = records[:6]
    y = np.array([r.ooc for r in sub])
    assert detector.fit(sub, y) is detector
    assert detector.n_trainable_params_ == 0
    assert detector.predict(sub).dtype == bool
    assert detector.score(sub, y) == 1.0
    assert set(detector.predict_confidence(sub)) <= set(range(11))


def test_fit_rejects_bad_params(detector):
    with pytest.raises(ValueError):
        clone(detector).set_params(top_k=0).fit()
    with pytest.raises(ValueError):
        OOCDetector().fit()


def test_verify_trace_is_complete(detector, records):
    rec = next(r for r in records if r.id == "poison-00")
    v = detector.verify(rec)
    trace = v.to_trace()
    retrieved = {e["id"] for e in trace["evidence"]}
    decided = {e["candidate_id"] for e in trace["filter_trace"]}
    assert retrieved == decided
    assert set(trace["submitted"]) <= retrieved
    assert len(trace["submitted"]) <= 3
    assert "timings" not in json.dumps(trace)


def test_drop_image_evidence_reaches_reasoner_without_image_items(suite, records):
    eff = load_config(suite / "config.yaml", environ={}, overrides={"filter.drop_image_evidence": True})
    report = run_benchmark(records, build_detector(eff), suite / "out", eff.fingerprint, 4)
    for row in report.per_sample:
        trace = json.loads((suite / "out" / row.trace_path).read_text())
        by_id = {e["id"]: e for e in trace["evidence"]}
        assert all(by_id[i]["origin"] != Origin.IMAGE_SEARCH.value for i in trace["submitted"])


def test_one_failing_sample_does_not_stop_the_run(detector, records):
    class Flaky(type(detector.reasoner)):
        def _fetch(self, document, stage_id):
            if "Lagos" in document.text:
                raise RuntimeError("boom")
            return super()._fetch(document, stage_id)

    flaky = Flaky({"stances": detector.reasoner.stances, "fallback": detector.reasoner.fallback})
    det = clone(detector).set_params(reasoner=flaky)
    report = run_benchmark(records, det, None, "fp", 2)
    failed = [r for r in report.per_sample if r.error]
    assert failed and all(r.error["code"] == "EInternal" for r in failed)
    assert report.metrics.n_total == len(records)
    assert report.metrics.n_failed == len(failed)


def test_provider_error_is_recorded_with_partial_trace(detector, records, tmp_path):
    from oocverify.retrieval import FixtureSearchProvider

    det = clone(detector).set_params(text_search=FixtureSearchProvider(tmp_path / "empty", "nothing"))
    report = run_benchmark(records[:2], det, tmp_path / "out", "fp", 1)
    for row in report.per_sample:
        assert row.predicted is None and row.error["code"] == ProviderUnavailable.code
        assert json.loads((tmp_path / "out" / row.trace_path).read_text())["error"]["code"] == "EProviderUnavailable"
