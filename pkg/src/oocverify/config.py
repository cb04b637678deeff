"""YAML configuration, environment overrides, and detector assembly.

Relative paths in a config file are resolved against the file's directory.
Credentials never come from the file: a REST provider named ``text_search``
reads its bearer token from ``OOCVERIFY_TEXT_SEARCH_TOKEN`` and may have its
endpoint replaced by ``OOCVERIFY_TEXT_SEARCH_ENDPOINT``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Mapping

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .cache import EvidenceCache, Replay
from .errors import ConfigInvalid
from .filtering import DEFAULT_ALLOWLIST, load_allowlist
from .pipeline import OOCDetector
from .reasoning import ChatProvider, RestChat, RuleChat, ScriptedChat
from .retrieval import FixtureSearchProvider, RestSearchProvider, SearchProvider
from .similarity import Embedder, FixtureEmbedder, ImageLoader, RestEmbedder

ENV_PREFIX = "OOCVERIFY_"
PROVIDER_SLOTS = ("text_search", "image_search", "text_embedder", "image_embedder", "reasoner", "stage2_reasoner")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProviderSpec(_Section):
    kind: Literal["fixture", "rest", "rule", "scripted"]
    provider_id: str | None = None
    path: str | None = None
    endpoint: str | None = None
    timeout: float = Field(30.0, gt=0)
    max_concurrency: int = Field(4, ge=1)


class Providers(_Section):
    text_search: ProviderSpec | None = None
    image_search: ProviderSpec | None = None
    text_embedder: ProviderSpec | None = None
    image_embedder: ProviderSpec | None = None
    reasoner: ProviderSpec | None = None
    stage2_reasoner: ProviderSpec | None = None


class RetrievalSection(_Section):
    limit: int = Field(10, ge=1)
    concurrent: bool = True


class FilterSection(_Section):
    theta: float = Field(0.7, ge=0.0, le=1.0)
    strategy: Literal["both", "similarity", "domain"] = "both"
    allowlist_path: str | None = None
    allowlist: list[str] = Field(default_factory=list)
    language: str | None = "en"
    dedup: bool = True
    drop_text_evidence: bool = False
    drop_image_evidence: bool = False
    disable_domain_filter: bool = False


class RankingSection(_Section):
    top_k: int = Field(3, ge=1)
    borderline_band: float = Field(0.01, ge=0.0)


class ReasoningSection(_Section):
    max_retries: int = Field(1, ge=0, le=1)


class CacheSection(_Section):
    dir: str = ".oocverify/cache"


class ImagesSection(_Section):
    root: str | None = None


class OutputSection(_Section):
    trace_dir: str = ".oocverify/traces"


class BenchmarkSection(_Section):
    workers: int = Field(4, ge=1)


class Config(_Section):
    retrieval: RetrievalSection = Field(default_factory=RetrievalSection)
    providers: Providers = Field(default_factory=Providers)
    filter: FilterSection = Field(default_factory=FilterSection)
    ranking: RankingSection = Field(default_factory=RankingSection)
    reasoning: ReasoningSection = Field(default_factory=ReasoningSection)
    cache: CacheSection = Field(default_factory=CacheSection)
    images: ImagesSection = Field(default_factory=ImagesSection)
    output: OutputSection = Field(default_factory=OutputSection)
    benchmark: BenchmarkSection = Field(default_factory=BenchmarkSection)


# Operational settings that cannot change a verdict stay out of the fingerprint.
_UNFINGERPRINTED = {"cache": True, "output": True, "benchmark": True}


@dataclass(frozen=True)
class EffectiveConfig:
    config: Config
    base_dir: Path
    fingerprint: str
    secrets: Mapping[str, str]

    def resolve(self, path: str) -> Path:
        p = Path(path).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    @property
    def allowlist(self) -> frozenset[str]:
        f = self.config.filter
        base = load_allowlist(self.resolve(f.allowlist_path)) if f.allowlist_path else DEFAULT_ALLOWLIST
        return base | {d.strip().lower() for d in f.allowlist}


def _set_dotted(doc: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = doc
    for key in parents:
        child = node.get(key)
        if not isinstance(child, dict):
            child = node[key] = {}
        node = child
    node[leaf] = value


def fingerprint_of(config: Config) -> str:
    body = config.model_dump(mode="json", exclude=_UNFINGERPRINTED)
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(
    path: str | os.PathLike[str] | None = None,
    environ: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> EffectiveConfig:
    """Load, validate and fingerprint a configuration.

    ``overrides`` maps dotted keys (``"ranking.top_k"``) to values and is
    applied after the file and the environment.
    """
    environ = os.environ if environ is None else environ
    doc: dict[str, Any] = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        base_dir = path.resolve().parent
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigInvalid(str(path), "config file not found") from None
        except yaml.YAMLError as exc:
            raise ConfigInvalid(str(path), f"invalid YAML: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigInvalid("<root>", "config must be a mapping")
        doc = loaded or {}

    secrets: dict[str, str] = {}
    providers = doc.get("providers") if isinstance(doc.get("providers"), dict) else {}
    for slot in PROVIDER_SLOTS:
        env = f"{ENV_PREFIX}{slot.upper()}"
        if f"{env}_ENDPOINT" in environ and isinstance(providers.get(slot), dict):
            providers[slot]["endpoint"] = environ[f"{env}_ENDPOINT"]
        if environ.get(f"{env}_TOKEN"):
            secrets[slot] = environ[f"{env}_TOKEN"]

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(doc, dotted, value)

    try:
        config = Config.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigInvalid(key, err["msg"]) from None

    eff = EffectiveConfig(config, base_dir, fingerprint_of(config), secrets)
    _check_paths(eff)
    return eff


def _check_paths(eff: EffectiveConfig) -> None:
    c = eff.config
    if c.filter.allowlist_path and not eff.resolve(c.filter.allowlist_path).is_file():
        raise ConfigInvalid("filter.allowlist_path", f"file not found: {c.filter.allowlist_path}")
    if c.images.root and not eff.resolve(c.images.root).is_dir():
        raise ConfigInvalid("images.root", f"directory not found: {c.images.root}")
    for slot in PROVIDER_SLOTS:
        spec: ProviderSpec | None = getattr(c.providers, slot)
        if spec is None:
            continue
        key = f"providers.{slot}"
        if spec.kind == "rest":
            if not spec.endpoint:
                raise ConfigInvalid(f"{key}.endpoint", "required for kind 'rest'")
        elif not spec.path:
            raise ConfigInvalid(f"{key}.path", f"required for kind {spec.kind!r}")
        elif not eff.resolve(spec.path).exists():
            raise ConfigInvalid(f"{key}.path", f"not found: {spec.path}")
    if eff.config.filter.strategy != "similarity" and not eff.config.filter.disable_domain_filter and not eff.allowlist:
        raise ConfigInvalid("filter.allowlist", "domain filter enabled with an empty allowlist")


def _kind_error(slot: str, kind: str) -> ConfigInvalid:
    return ConfigInvalid(f"providers.{slot}.kind", f"kind {kind!r} not valid here")


def build_search(eff: EffectiveConfig, slot: str, replay: Replay) -> SearchProvider | None:
    spec: ProviderSpec | None = getattr(eff.config.providers, slot)
    if spec is None:
        return None
    common = dict(replay=replay, max_concurrency=spec.max_concurrency)
    if spec.kind == "fixture":
        return FixtureSearchProvider(eff.resolve(spec.path), spec.provider_id or f"fixture-{slot}", **common)  # type: ignore[arg-type]
    if spec.kind == "rest":
        return RestSearchProvider(spec.endpoint, spec.provider_id or f"rest-{slot}",  # type: ignore[arg-type]
                                  token=eff.secrets.get(slot), timeout=spec.timeout, **common)
    raise _kind_error(slot, spec.kind)


def build_embedder(eff: EffectiveConfig, slot: str, modality: str, replay: Replay) -> Embedder | None:
    spec: ProviderSpec | None = getattr(eff.config.providers, slot)
    if spec is None:
        return None
    common = dict(replay=replay, max_concurrency=spec.max_concurrency)
    if spec.kind == "fixture":
        return FixtureEmbedder.from_file(eff.resolve(spec.path), modality,  # type: ignore[arg-type]
                                         provider_id=spec.provider_id or f"fixture-{slot}", **common)
    if spec.kind == "rest":
        return RestEmbedder(spec.endpoint, modality, spec.provider_id or f"rest-{slot}",  # type: ignore[arg-type]
                            token=eff.secrets.get(slot), timeout=spec.timeout, **common)
    raise _kind_error(slot, spec.kind)


def build_chat(eff: EffectiveConfig, slot: str, replay: Replay) -> ChatProvider | None:
    spec: ProviderSpec | None = getattr(eff.config.providers, slot)
    if spec is None:
        return None
    common = dict(replay=replay, max_concurrency=spec.max_concurrency)
    pid = spec.provider_id or f"{spec.kind}-{slot}"
    if spec.kind == "rule":
        return RuleChat.from_file(eff.resolve(spec.path), provider_id=pid, **common)  # type: ignore[arg-type]
    if spec.kind == "scripted":
        doc = json.loads(eff.resolve(spec.path).read_text(encoding="utf-8"))  # type: ignore[arg-type]
        return ScriptedChat(doc, provider_id=pid, **common)
    if spec.kind == "rest":
        return RestChat(spec.endpoint, pid, token=eff.secrets.get(slot),  # type: ignore[arg-type]
                        timeout=spec.timeout, **common)
    raise _kind_error(slot, spec.kind)


def build_detector(
    eff: EffectiveConfig, *, offline: bool = False, cache_dir: str | os.PathLike[str] | None = None
) -> OOCDetector:
    c = eff.config
    cache = EvidenceCache(cache_dir if cache_dir is not None else eff.resolve(c.cache.dir))
    replay = Replay(cache, offline=offline)
    image_root = eff.resolve(c.images.root) if c.images.root else None
    detector = OOCDetector(
        text_search=build_search(eff, "text_search", replay),
        image_search=build_search(eff, "image_search", replay),
        text_embedder=build_embedder(eff, "text_embedder", "text", replay),
        image_embedder=build_embedder(eff, "image_embedder", "image", replay),
        reasoner=build_chat(eff, "reasoner", replay),
        stage2_reasoner=build_chat(eff, "stage2_reasoner", replay),
        image_loader=ImageLoader(image_root, replay=replay),
        retrieval_limit=c.retrieval.limit,
        theta=c.filter.theta,
        strategy=c.filter.strategy,
        domain_allowlist=eff.allowlist,
        language=c.filter.language,
        dedup_enabled=c.filter.dedup,
        drop_text_evidence=c.filter.drop_text_evidence,
        drop_image_evidence=c.filter.drop_image_evidence,
        disable_domain_filter=c.filter.disable_domain_filter,
        top_k=c.ranking.top_k,
        borderline_band=c.ranking.borderline_band,
        max_retries=c.reasoning.max_retries,
        concurrent_retrieval=c.retrieval.concurrent,
    )
    if detector.reasoner is None:
        raise ConfigInvalid("providers.reasoner", "a reasoner provider must be configured")
    return detector
