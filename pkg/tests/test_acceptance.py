"""Exit criteria. Each test carries an ``acceptance`` marker; the terminal
summary prints one PASS/FAIL line per criterion."""

import json
import random
import re
import socket
import statistics
import string
import time
from fractions import Fraction
from pathlib import Path

import pytest

from oocverify import errors
from oocverify.config import build_detector, load_config
from oocverify.domain import ClaimPair
from oocverify.evaluation import evaluate, load_dataset
from oocverify.filtering import deduplicate, filter_by_similarity
from oocverify.pipeline import run_benchmark
from oocverify.ranking import rank_candidates
from oocverify.reasoning import (
    CandidateAssessment,
    FinalVerdict,
    KeyElements,
    Label,
    ScriptedChat,
    Stage1Assessment,
    Stance,
    fenced,
    parse_stage1_response,
    parse_stage2_response,
    run_two_stage,
    serialize_stage1,
    serialize_verdict,
)

from conftest import FIXTURES, cand

REPO = Path(__file__).resolve().parents[1]
N_SETS = 1000
BAND = 0.01


def _run(suite: Path, report: Path | None, cache: Path, offline: bool = False, **overrides):
    eff = load_config(suite / "config.yaml", environ={}, overrides=overrides)
    det = build_detector(eff, offline=offline, cache_dir=cache)
    records = load_dataset(suite / "dataset.jsonl")
    return eff, run_benchmark(records, det, report, eff.fingerprint, eff.config.benchmark.workers)


def _report_files(root: Path) -> dict[str, bytes]:
    files = [root / "report.json", *sorted((root / "traces").glob("*.json"))]
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


# 1 -------------------------------------------------------------------------


@pytest.mark.acceptance(1, "offline golden end-to-end, byte-identical report in < 5 s")
def test_golden_end_to_end(suite, tmp_path):
    assert len(load_dataset(suite / "dataset.jsonl")) >= 20
    start = time.perf_counter()
    _run(suite, tmp_path / "report", tmp_path / "cache")
    elapsed = time.perf_counter() - start
    got, want = _report_files(tmp_path / "report"), _report_files(suite / "golden")
    assert sorted(got) == sorted(want)
    for name in want:
        assert got[name] == want[name], f"{name} differs from golden"
    assert elapsed < 5.0, f"runtime {elapsed:.2f}s"


# 2 -------------------------------------------------------------------------


def _random_scored(rng: random.Random, n: int, grid: list[float]):
    def score():
        r = rng.random()
        if r < 0.15:
            return None
        if r < 0.4:
            return rng.choice(grid)  # land exactly on a threshold now and then
        return rng.uniform(-1, 1)

    out = []
    for i in range(n):
        t, v = score(), score()
        if t is None and v is None:
            v = rng.uniform(-1, 1)
        out.append(cand(f"c{i}", text=t, visual=v))
    return out


@pytest.mark.acceptance(2, "similarity threshold: boundary exactness and monotone subsets")
def test_threshold_boundary_and_monotonicity():
    eps = 1e-6
    kept, _ = filter_by_similarity([cand(visual=0.70)], 0.7)
    assert len(kept) == 1
    kept, _ = filter_by_similarity([cand(visual=0.70 - eps)], 0.7)
    assert kept == []
    kept, _ = filter_by_similarity([cand(text=0.70 - eps, visual=0.70 - eps)], 0.7)
    assert kept == []

    rng = random.Random(20240601)
    violations = 0
    for _ in range(N_SETS):
        thetas = sorted({0.7, *(round(rng.random(), 3) for _ in range(9))})
        while len(thetas) < 10:
            thetas = sorted({*thetas, rng.random()})
        xs = _random_scored(rng, rng.randint(0, 25), thetas)
        order = [c.id for c in xs]
        previous: set[str] | None = None
        for theta in thetas:
            kept, trace = filter_by_similarity(xs, theta)
            ids = [c.id for c in kept]
            expect = [c.id for c in xs if max(s for s in (c.scores.text_sim, c.scores.visual_sim) if s is not None) >= theta]
            violations += ids != expect
            violations += ids != [i for i in order if i in set(ids)]
            violations += len(trace.entries) != len(xs)
            if previous is not None:
                violations += not set(ids) <= previous
            previous = set(ids)
    assert violations == 0


# 3 -------------------------------------------------------------------------


def _bands(visual: list[float]) -> list[int]:
    """Band index per value of a descending list (anchored on each band's top)."""
    out, anchor, idx = [], None, -1
    for v in visual:
        if anchor is None or not anchor - v < BAND:
            anchor, idx = v, idx + 1
        out.append(idx)
    return out


def _ranking_violations(xs, ranked) -> int:
    bad = 0
    bad += sorted(c.id for c in ranked) != sorted(c.id for c in xs)
    vis = [c for c in ranked if c.scores.visual_sim is not None]
    tail = [c for c in ranked if c.scores.visual_sim is None]
    bad += ranked != vis + tail
    t = lambda c: float("-inf") if c.scores.text_sim is None else c.scores.text_sim  # noqa: E731
    bad += any(t(a) < t(b) for a, b in zip(tail, tail[1:]))
    vs = [c.scores.visual_sim for c in vis]
    bands = _bands(sorted(vs, reverse=True))
    band_of = {}
    for v, b in zip(sorted(vs, reverse=True), bands):
        band_of.setdefault(v, b)
    for i, a in enumerate(vis):
        for b in vis[i + 1:]:
            va, vb = a.scores.visual_sim, b.scores.visual_sim
            if abs(va - vb) >= BAND:
                bad += va < vb  # non-borderline: visual decides
            if band_of[va] == band_of[vb]:
                bad += t(a) < t(b)  # same band: text decides
            else:
                bad += band_of[va] > band_of[vb]  # bands appear best first
    return bad


@pytest.mark.acceptance(3, "visual-centric ranking properties over randomized sets")
def test_ranking_properties():
    rng = random.Random(77)
    violations = 0
    for _ in range(N_SETS):
        size = rng.randint(0, 20)
        centers = [rng.uniform(0, 1) for _ in range(3)]
        xs = []
        for i in range(size):
            r = rng.random()
            if r < 0.1:
                v = None
            elif r < 0.6:
                v = min(1.0, max(-1.0, rng.choice(centers) + rng.uniform(-0.012, 0.012)))  # dense clusters
            elif r < 0.7:
                v = rng.choice(centers)  # exact ties
            else:
                v = rng.uniform(-1, 1)
            t = rng.choice([None, rng.uniform(-1, 1), round(rng.uniform(0, 1), 1)])
            if v is None and t is None:
                t = 0.0
            xs.append(cand(f"c{i}", text=t, visual=v))
        ranked = rank_candidates(xs, BAND)
        violations += _ranking_violations(xs, ranked)
        shuffled = xs[:]
        rng.shuffle(shuffled)
        again = rank_candidates(shuffled, BAND)
        key = lambda c: (c.scores.visual_sim, c.scores.text_sim)  # noqa: E731
        violations += [key(c) for c in again] != [key(c) for c in ranked]
        if len({key(c) for c in xs}) == len(xs):  # no exact ties: identical order
            violations += [c.id for c in again] != [c.id for c in ranked]
    assert violations == 0


# 4 -------------------------------------------------------------------------

_BASE_TITLES = [
    "Flood hits city X",
    "Storm batters coast overnight",
    "Protesters march on parliament",
    "Wildfire forces evacuations",
    "Minister visits flood zone",
    "Floods hit city X again",
]


def _variant(rng: random.Random, title: str) -> str:
    out = []
    for ch in title:
        r = rng.random()
        if ch == " " and r < 0.3:
            out.append(rng.choice(["  ", "\t", " \n "]))
            continue
        out.append(ch.upper() if r < 0.3 else ch.lower() if r < 0.6 else ch)
        if rng.random() < 0.1:
            out.append(rng.choice("!?.,;:'\"()-"))
    pre = rng.choice(["", " ", "“", "'"])
    post = rng.choice(["", "!", "?", "”", " ."])
    return pre + "".join(out) + post


@pytest.mark.acceptance(4, "dedup idempotence and one survivor per (domain, title) group")
def test_dedup_properties():
    rng = random.Random(4)
    domains = ["bbc.co.uk", "theguardian.com", "usatoday.com"]
    violations = 0
    for _ in range(N_SETS):
        xs, truth = [], {}
        for i in range(rng.randint(0, 25)):
            if rng.random() < 0.1:
                title, group = None, None
            else:
                base = rng.randrange(len(_BASE_TITLES))
                title = _variant(rng, _BASE_TITLES[base])
                group = (rng.choice(domains), base)
            domain = group[0] if group else rng.choice(domains)
            xs.append(cand(f"c{i}", title=title, domain=domain))
            truth[f"c{i}"] = group
        once, _ = deduplicate(xs)
        twice, trace2 = deduplicate(once)
        violations += [c.id for c in twice] != [c.id for c in once]
        violations += bool(trace2.removed)
        survivors = [c.id for c in once]
        groups = {g for g in truth.values() if g is not None}
        for g in groups:
            members = [cid for cid, h in truth.items() if h == g]
            alive = [m for m in members if m in survivors]
            violations += alive != members[:1]  # exactly one, and it is the first seen
        violations += any(truth[c.id] is None and c.id not in survivors for c in xs)
    assert violations == 0


# 5 -------------------------------------------------------------------------


def _oracle(pred, gold):
    def acc(ids):
        return None if not ids else Fraction(sum(pred[i] is not None and pred[i] == gold[i] for i in ids), len(ids))

    ids = list(gold)
    return acc(ids), acc([i for i in ids if gold[i]]), acc([i for i in ids if not gold[i]])


@pytest.mark.acceptance(5, "metrics equal a brute-force counting oracle; balanced identity exact")
def test_metrics_oracle():
    rng = random.Random(5)
    violations = 0
    for k in range(N_SETS):
        n = rng.randint(0, 60)
        if k % 2:
            labels = [True] * (n // 2) + [False] * (n // 2)  # balanced half of the runs
            rng.shuffle(labels)
        else:
            labels = [rng.random() < 0.5 for _ in range(n)]
        gold = {f"s{i}": y for i, y in enumerate(labels)}
        pred = {i: rng.choice([True, False, None]) for i in gold}
        m = evaluate(pred, gold)
        violations += (m.acc_all, m.acc_ooc, m.acc_nooc) != _oracle(pred, gold)
        n_ooc = sum(labels)
        if n_ooc and n_ooc * 2 == len(labels):
            violations += m.acc_all != (m.acc_ooc + m.acc_nooc) / 2
    assert violations == 0


# 6 -------------------------------------------------------------------------


@pytest.mark.acceptance(6, "ablations: domain filter, image and text evidence each matter")
def test_ablation_mechanisms(suite, tmp_path):
    design = json.loads((suite / "design.json").read_text())
    cache = tmp_path / "cache"

    def correct(**overrides):
        _, rep = _run(suite, None, cache, **overrides)
        return {r.id for r in rep.per_sample if r.correct}

    both = correct()
    similarity_only = correct(**{"filter.strategy": "similarity"})
    no_domain = both - correct(**{"filter.disable_domain_filter": True})
    no_image = both - correct(**{"filter.drop_image_evidence": True})
    no_text = both - correct(**{"filter.drop_text_evidence": True})
    print(f"\nboth={len(both)} similarity_only={len(similarity_only)} "
          f"flips: domain={sorted(no_domain)} image={sorted(no_image)} text={sorted(no_text)}")
    assert len(both) > len(similarity_only)
    assert len({s for s in no_domain if design[s] == "poisoned"}) >= 3
    assert len(no_image) >= 2
    assert len(no_text) >= 2


# 7 -------------------------------------------------------------------------


def _word(rng):
    alphabet = string.ascii_letters + string.digits + " .,!?'\"{}[]:`\\éü日本—\n"
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 24)))


@pytest.mark.acceptance(7, "parsers: round trips, adversarial fixtures, confidence range")
def test_parser_robustness(tmp_path):
    rng = random.Random(7)
    for _ in range(N_SETS):
        ids = [f"c{i}" for i in range(rng.randint(0, 5))]
        a = Stage1Assessment(
            tuple(
                CandidateAssessment(i, rng.choice(list(Stance)), _word(rng),
                                    KeyElements(tuple(_word(rng) for _ in range(rng.randint(0, 3))),
                                                (_word(rng),), ()))
                for i in ids
            ),
            _word(rng),
        )
        assert parse_stage1_response(serialize_stage1(a), ids) == a
        v = FinalVerdict(rng.choice(list(Label)), rng.randint(0, 10), _word(rng),
                         tuple(rng.sample(ids, rng.randint(0, len(ids)))))
        assert parse_stage2_response("thinking...\n" + serialize_verdict(v), ids) == v

    cases = json.loads((FIXTURES / "adversarial_responses.json").read_text(encoding="utf-8"))
    assert len(cases) >= 20
    img = tmp_path / "i.png"
    img.write_bytes(b"img")
    claim = ClaimPair("s", str(img), "caption")
    evidence = [cand("c1", visual=0.9), cand("c2", visual=0.8, title="Other")]
    good_s1 = fenced({"assessments": [{"id": "c1", "stance": "supports"}, {"id": "c2", "stance": "refutes"}],
                      "summary": "s"})
    for case in cases:
        parse = parse_stage1_response if case["stage"] == "stage1" else parse_stage2_response
        with pytest.raises(errors.ParseError) as info:
            parse(case["text"], ["c1", "c2"])
        assert type(info.value).__name__ == case["error"], case["name"]
        # end to end: the same answer twice never turns into a verdict
        if case["stage"] == "stage1":
            chat = ScriptedChat({"stage1": [case["text"]] * 2})
        else:
            chat = ScriptedChat({"stage1": [good_s1], "stage2": [case["text"]] * 2})
        with pytest.raises(errors.ParseError) as info:
            run_two_stage(claim, evidence, chat)
        assert type(info.value).__name__ == case["error"], case["name"]

    for x in [*range(-50, 0), *range(11, 60), 10.5, -0.5, 1e9, float("inf"), float("nan")]:
        text = '```json\n{"label": "OOC", "confidence": %s, "explanation": ""}\n```' % json.dumps(x)
        with pytest.raises(errors.ParseError):
            parse_stage2_response(text)


# 8 -------------------------------------------------------------------------


@pytest.mark.acceptance(8, "determinism on warm cache; zero network calls offline")
def test_determinism_and_offline_replay(suite, tmp_path, monkeypatch):
    cache = tmp_path / "cache"
    _run(suite, tmp_path / "warm-up", cache)
    eff1, _ = _run(suite, tmp_path / "a", cache)
    eff2, _ = _run(suite, tmp_path / "b", cache)
    assert eff1.fingerprint == eff2.fingerprint
    assert _report_files(tmp_path / "a") == _report_files(tmp_path / "b")

    attempts = []

    def guard(*args, **kwargs):
        attempts.append(args)
        raise OSError("network disabled in this test")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket.socket, "connect_ex", guard)
    monkeypatch.setattr(socket, "create_connection", guard)
    monkeypatch.setattr(socket, "getaddrinfo", guard)

    # every provider swapped for a REST client with the same id: only the cache can answer
    rest = {f"providers.{slot}": {"kind": "rest", "provider_id": pid, "endpoint": "http://provider.invalid/api"}
            for slot, pid in [("text_search", "fixture-text"), ("image_search", "fixture-image"),
                              ("text_embedder", "fixture-embed"), ("image_embedder", "fixture-embed"),
                              ("reasoner", "rule-reasoner")]}
    _run(suite, tmp_path / "offline", cache, offline=True, **rest)
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    off = json.loads((tmp_path / "offline" / "report.json").read_text())
    assert off["metrics"] == a["metrics"]
    assert [r["predicted"] for r in off["per_sample"]] == [r["predicted"] for r in a["per_sample"]]

    _, cold = _run(suite, None, tmp_path / "cold", offline=True, **rest)
    assert all(r.error and r.error["code"] == "EProviderUnavailable" for r in cold.per_sample)
    assert attempts == []


# 9 -------------------------------------------------------------------------

_WEIGHT_SUFFIXES = {".pt", ".pth", ".bin", ".safetensors", ".ckpt", ".h5", ".onnx", ".pb", ".tflite",
                    ".gguf", ".pkl", ".joblib", ".npz", ".npy", ".msgpack"}
_TRAINING = [
    r"^\s*(import|from)\s+(torch|tensorflow|jax|flax|keras|transformers|sentence_transformers|optax)\b",
    r"\.backward\(",
    r"\boptimizer\b",
    r"\bzero_grad\b",
    r"requires_grad",
    r"\blearning_rate\b",
    r"\.partial_fit\(",
]


@pytest.mark.acceptance(9, "training-free: no weights, no training code path")
def test_repo_lint():
    skip = {".git", ".cache", "__pycache__", ".pytest_cache", ".hypothesis", "build", "dist"}
    files = [p for p in REPO.rglob("*") if p.is_file() and not skip & set(p.relative_to(REPO).parts)
             and not any(part.endswith(".egg-info") for part in p.parts)]
    weights = [p for p in files if p.suffix.lower() in _WEIGHT_SUFFIXES or p.stat().st_size > 5_000_000]
    assert weights == []
    hits = []
    for p in (REPO / "src").rglob("*.py"):
        for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            if any(re.search(rx, line) for rx in _TRAINING):
                hits.append(f"{p.relative_to(REPO)}:{n}: {line.strip()}")
    assert hits == []
    deps = (REPO / "pyproject.toml").read_text()
    for banned in ("torch", "tensorflow", "transformers", "jax"):
        assert f'"{banned}' not in deps


# 10 ------------------------------------------------------------------------


@pytest.mark.acceptance(10, "median per-sample overhead excluding provider time < 100 ms")
def test_overhead_budget(suite, tmp_path):
    _, report = _run(suite, None, tmp_path / "cache")
    overheads = [r.timings["overhead"] for r in report.per_sample]
    median = statistics.median(overheads)
    print(f"\nmedian overhead {median * 1000:.2f} ms over {len(overheads)} samples")
    assert report.median_overhead() == median
    assert median < 0.100
