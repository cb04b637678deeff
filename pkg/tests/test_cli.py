import json

import pytest
import yaml
from click.testing import CliRunner

from oocverify.cli import main
from oocverify.reasoning import fenced


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def scripted_config(suite):
    """Suite config whose reasoner always answers OOC with confidence 9."""
    answer = fenced({"label": "OOC", "confidence": 9, "explanation": "scripted", "evidence": []})
    (suite / "scripted.json").write_text(json.dumps({"stage2": [answer]}))
    doc = yaml.safe_load((suite / "config.yaml").read_text())
    doc["providers"]["reasoner"] = {"kind": "scripted", "path": "scripted.json"}
    path = suite / "scripted.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def _verify_args(suite, config, *extra):
    sample = json.loads((suite / "dataset.jsonl").read_text().splitlines()[-1])
    assert sample["id"] == "empty-00"  # no evidence: only the Stage 2 answer is needed
    return ["verify", "--image", str(suite / sample["image_path"]), "--caption", sample["caption"],
            "--config", str(config), "--trace-dir", str(suite / "traces"), *extra]


def test_scripted_ooc_exits_one(runner, suite, scripted_config):
    res = runner.invoke(main, _verify_args(suite, scripted_config))
    assert res.exit_code == 1, res.output
    assert "verdict: OOC" in res.output and "trace:" in res.output


def test_json_output_matches_verdict_schema(runner, suite, scripted_config):
    res = runner.invoke(main, _verify_args(suite, scripted_config, "--json"))
    doc = json.loads(res.stdout)
    assert set(doc) == {"label", "confidence", "explanation", "evidence", "trace"}
    assert (doc["label"], doc["confidence"]) == ("OOC", 9)
    trace = json.loads(open(doc["trace"]).read())
    assert trace["verdict"]["label"] == "OOC"


def test_offline_cold_cache_exits_two_naming_key(runner, suite, tmp_path):
    res = runner.invoke(main, _verify_args(suite, suite / "config.yaml", "--offline",
                                           "--cache-dir", str(tmp_path / "cold")))
    assert res.exit_code == 2
    assert "EProviderUnavailable" in res.stderr and "no cache entry for key fixture-" in res.stderr


def test_offline_after_warm_run_succeeds(runner, suite, tmp_path):
    cache = str(tmp_path / "warm")
    first = runner.invoke(main, _verify_args(suite, suite / "config.yaml", "--cache-dir", cache, "--json"))
    second = runner.invoke(main, _verify_args(suite, suite / "config.yaml", "--cache-dir", cache, "--json", "--offline"))
    assert first.exit_code == second.exit_code != 2
    assert json.loads(first.stdout)["label"] == json.loads(second.stdout)["label"]


def test_bad_config_exits_two(runner, suite, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("ranking: {top_k: 0}\n")
    res = runner.invoke(main, _verify_args(suite, bad))
    assert res.exit_code == 2 and "ranking.top_k" in res.stderr


def test_benchmark_and_cache_commands(runner, suite, tmp_path):
    cfg = str(suite / "config.yaml")
    res = runner.invoke(main, ["benchmark", "--dataset", str(suite / "dataset.jsonl"),
                               "--report", str(tmp_path / "rep"), "--config", cfg])
    assert res.exit_code == 0, res.output
    assert res.stdout.strip().startswith("all=100.00 ooc=100.00 nooc=100.00 n=24")
    assert (tmp_path / "rep" / "report.json").is_file()

    ablated = runner.invoke(main, ["benchmark", "--dataset", str(suite / "dataset.jsonl"),
                                   "--report", str(tmp_path / "rep2"), "--config", cfg, "--disable-domain-filter"])
    assert "all=83.33" in ablated.stdout

    ls = runner.invoke(main, ["cache", "ls", "--config", cfg])
    assert ls.exit_code == 0 and "fixture-text" in ls.stdout
    exp = runner.invoke(main, ["cache", "export", str(tmp_path / "c.tgz"), "--config", cfg])
    assert exp.exit_code == 0 and (tmp_path / "c.tgz").is_file()
    clr = runner.invoke(main, ["cache", "clear", "--config", cfg])
    assert clr.exit_code == 0 and "removed" in clr.stdout
    assert runner.invoke(main, ["cache", "ls", "--config", cfg]).stdout == ""


def test_convert_newsclippings(runner, tmp_path):
    (tmp_path / "ann.json").write_text(json.dumps({"annotations": [
        {"id": 1, "image_id": 1, "falsified": False},
        {"id": 1, "image_id": 2, "falsified": True},
    ]}))
    (tmp_path / "vn.json").write_text(json.dumps([
        {"id": 1, "caption": "Storm hits coast", "image_path": "./bbc/images/1.jpg"},
        {"id": 2, "caption": "Minister visits", "image_path": "./bbc/images/2.jpg"},
    ]))
    out = tmp_path / "out.jsonl"
    res = runner.invoke(main, ["convert-newsclippings", "--annotations", str(tmp_path / "ann.json"),
                               "--visualnews", str(tmp_path / "vn.json"), "--image-root", "/data/vn",
                               "--out", str(out)])
    assert res.exit_code == 0 and "wrote 2 records" in res.stdout
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert rows[1] == {"id": "1-2", "image_path": "/data/vn/bbc/images/2.jpg",
                       "caption": "Storm hits coast", "ooc": True}
