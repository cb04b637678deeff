"""Command-line entry point: ``oocverify verify|benchmark|cache|serve``.

``verify`` exit codes: 0 not out of context, 1 out of context, 2 error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any

import click

from .cache import EvidenceCache
from .config import EffectiveConfig, build_detector, load_config
from .domain import ClaimPair
from .errors import OOCError
from .evaluation import dumps, load_dataset, trace_filename, write_atomic
from .pipeline import OOCDetector, Verification, claim_fingerprint, run_benchmark

EXIT_NOOC, EXIT_OOC, EXIT_ERROR = 0, 1, 2


def _load(config: str | None, overrides: dict[str, Any]) -> EffectiveConfig:
    try:
        return load_config(config, overrides=overrides)
    except OOCError as exc:
        click.echo(f"error: {exc.code}: {exc}", err=True)
        sys.exit(EXIT_ERROR)


def _cache_root(eff: EffectiveConfig, cache_dir: str | None) -> Path:
    return Path(cache_dir) if cache_dir else eff.resolve(eff.config.cache.dir)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Out-of-context image-caption verification."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


_strategy = click.Choice(["both", "similarity", "domain"])


def _evidence_table(result: Verification) -> str:
    lines = [f"{'id':<5} {'domain':<24} {'visual':>7} {'text':>7}  title"]
    for c in result.submitted:
        s = c.scores
        fmt = lambda x: "-" if x is None else f"{x:.3f}"  # noqa: E731
        lines.append(
            f"{c.id:<5} {c.domain[:24]:<24} {fmt(s and s.visual_sim):>7} {fmt(s and s.text_sim):>7}  {(c.title or '')[:60]}"
        )
    return "\n".join(lines) if result.submitted else "(no evidence reached the reasoner)"


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(dir_okay=False))
@click.option("--caption", required=True)
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--offline", is_flag=True, help="Serve every provider call from the cache; fail on a miss.")
@click.option("--json", "as_json", is_flag=True, help="Print the verdict as JSON.")
@click.option("--top-k", type=click.IntRange(min=1), default=None)
@click.option("--strategy", type=_strategy, default=None)
@click.option("--cache-dir", type=click.Path(file_okay=False), default=None)
@click.option("--trace-dir", type=click.Path(file_okay=False), default=None)
def verify(image_path: str, caption: str, config: str | None, offline: bool, as_json: bool,
           top_k: int | None, strategy: str | None, cache_dir: str | None, trace_dir: str | None) -> None:
    """Verify one image-caption pair."""
    eff = _load(config, {"ranking.top_k": top_k, "filter.strategy": strategy})
    try:
        detector = build_detector(eff, offline=offline, cache_dir=_cache_root(eff, cache_dir))
        image = Path(image_path).read_bytes()
    except (OOCError, OSError) as exc:
        click.echo(f"error: {getattr(exc, 'code', 'EImageUnreadable')}: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    claim = ClaimPair(claim_fingerprint(caption, image), image_path, caption)
    traces = Path(trace_dir) if trace_dir else eff.resolve(eff.config.output.trace_dir)
    trace_path = traces / trace_filename(claim.id)
    try:
        result = detector.verify(claim, image=image)
    except OOCError as exc:
        if isinstance(exc.trace, Verification):
            write_atomic(trace_path, dumps(exc.trace.to_trace()))
        click.echo(f"error: {exc.code}: {exc}", err=True)
        click.echo(f"trace: {trace_path}", err=True)
        sys.exit(EXIT_ERROR)
    write_atomic(trace_path, dumps(result.to_trace()))
    verdict = result.verdict
    assert verdict is not None
    if as_json:
        click.echo(json.dumps({**verdict.to_dict(), "trace": str(trace_path)}, ensure_ascii=False))
    else:
        click.echo(f"verdict: {verdict.label.value}  (confidence {verdict.confidence}/10)")
        click.echo(f"explanation: {verdict.explanation}")
        click.echo("evidence:")
        click.echo(_evidence_table(result))
        click.echo(f"trace: {trace_path}")
    sys.exit(EXIT_OOC if verdict.is_ooc else EXIT_NOOC)


@main.command()
@click.option("--dataset", required=True, type=click.Path(dir_okay=False, exists=True))
@click.option("--report", "report_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--offline", is_flag=True)
@click.option("--cache-dir", type=click.Path(file_okay=False), default=None)
@click.option("--top-k", type=click.IntRange(min=1), default=None)
@click.option("--strategy", type=_strategy, default=None)
@click.option("--theta", type=click.FloatRange(0.0, 1.0), default=None)
@click.option("--drop-text-evidence", is_flag=True, default=None)
@click.option("--drop-image-evidence", is_flag=True, default=None)
@click.option("--disable-domain-filter", is_flag=True, default=None)
@click.option("--no-dedup", is_flag=True, default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None)
def benchmark(dataset: str, report_dir: str, config: str | None, offline: bool, cache_dir: str | None,
              top_k: int | None, strategy: str | None, theta: float | None, drop_text_evidence: bool | None,
              drop_image_evidence: bool | None, disable_domain_filter: bool | None, no_dedup: bool | None,
              workers: int | None) -> None:
    """Run a labelled dataset through the pipeline and report All/OOC/NOOC accuracy."""
    eff = _load(config, {
        "ranking.top_k": top_k,
        "filter.strategy": strategy,
        "filter.theta": theta,
        "filter.drop_text_evidence": drop_text_evidence or None,
        "filter.drop_image_evidence": drop_image_evidence or None,
        "filter.disable_domain_filter": disable_domain_filter or None,
        "filter.dedup": False if no_dedup else None,
        "benchmark.workers": workers,
    })
    try:
        detector: OOCDetector = build_detector(eff, offline=offline, cache_dir=_cache_root(eff, cache_dir))
        records = load_dataset(dataset)
        report = run_benchmark(records, detector, report_dir, eff.fingerprint, eff.config.benchmark.workers)
    except OOCError as exc:
        click.echo(f"error: {exc.code}: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    click.echo(report.summary_line())


@main.group()
def cache() -> None:
    """Inspect or manage the response cache."""


def _cache(config: str | None, cache_dir: str | None) -> EvidenceCache:
    if cache_dir:
        return EvidenceCache(cache_dir)
    return EvidenceCache(_cache_root(_load(config, {}), None))


_cache_opts = [
    click.option("--config", type=click.Path(dir_okay=False), default=None),
    click.option("--cache-dir", type=click.Path(file_okay=False), default=None),
]


def _with_cache_opts(fn: Any) -> Any:
    for opt in reversed(_cache_opts):
        fn = opt(fn)
    return fn


@cache.command("ls")
@_with_cache_opts
def cache_ls(config: str | None, cache_dir: str | None) -> None:
    """List cache entries."""
    store = _cache(config, cache_dir)
    n = 0
    for header, size in store.entries():
        click.echo(f"{header['digest'][:16]}  {header['provider_id']:<24} {header['request_kind']:<15} "
                   f"{size:>8}  {header['stored_at']}")
        n += 1
    click.echo(f"{n} entries in {store.root}", err=True)


@cache.command("clear")
@_with_cache_opts
def cache_clear(config: str | None, cache_dir: str | None) -> None:
    """Delete every cache entry."""
    store = _cache(config, cache_dir)
    click.echo(f"removed {store.clear()} entries from {store.root}")


@cache.command("export")
@click.argument("tarball", type=click.Path(dir_okay=False))
@_with_cache_opts
def cache_export(tarball: str, config: str | None, cache_dir: str | None) -> None:
    """Write all cache entries to a gzipped tarball."""
    store = _cache(config, cache_dir)
    click.echo(f"exported {store.export(tarball)} entries to {tarball}")


@main.command()
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8080)
@click.option("--offline", is_flag=True)
@click.option("--cache-dir", type=click.Path(file_okay=False), default=None)
def serve(config: str | None, host: str, port: int, offline: bool, cache_dir: str | None) -> None:
    """Serve POST /verify and GET /health."""
    import uvicorn

    from .service import create_app

    eff = _load(config, {})
    root = _cache_root(eff, cache_dir)
    try:
        detector = build_detector(eff, offline=offline, cache_dir=root)
    except OOCError as exc:
        click.echo(f"error: {exc.code}: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    uvicorn.run(create_app(detector, EvidenceCache(root)), host=host, port=port)


@main.command("convert-newsclippings")
@click.option("--annotations", required=True, type=click.Path(dir_okay=False, exists=True))
@click.option("--visualnews", required=True, type=click.Path(dir_okay=False, exists=True),
              help="VisualNews data.json with id, caption and image_path per item.")
@click.option("--image-root", type=click.Path(file_okay=False), default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def convert_newsclippings_cmd(annotations: str, visualnews: str, image_root: str | None, out: str) -> None:
    """Convert a NewsCLIPpings split into the dataset format used by ``benchmark``."""
    from .convert import convert_newsclippings, write_jsonl

    n = write_jsonl(convert_newsclippings(annotations, visualnews, image_root), out)
    click.echo(f"wrote {n} records to {out}")


if __name__ == "__main__":
    main()
