"""Pipeline configuration: defaults, TOML loading, provider construction."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .builder import BuilderConfig, Enrichment, SchemaDetail
from .fusion import DEFAULT_INSTRUCTION, Placement
from .provider import (
    FailureKind,
    HttpBackend,
    MockBackend,
    ProviderClient,
    RetryPolicy,
    TokenBucket,
)
from .renderer import RenderStyle, StyleVariant
from .retrieval import RelevanceMode, RetrievalConfig
from .router import RoutingConfig, RoutingMode


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ModelNames:
    builder: str = "gpt-4o"
    router: str = "gpt-4o-mini"
    retrieval: str = "gpt-4o-mini"
    answer: str = "gpt-4o"


@dataclass(frozen=True)
class ProviderSettings:
    backend: str = "http"  # "http" | "mock"
    script: str | None = None  # mock script path
    models: ModelNames = ModelNames()
    retry: RetryPolicy = RetryPolicy()
    rate_limit_per_minute: int | None = None


@dataclass(frozen=True)
class PipelineConfig:
    builder: BuilderConfig = BuilderConfig()
    retrieval: RetrievalConfig = RetrievalConfig()
    routing: RoutingConfig = RoutingConfig()
    routing_mode: RoutingMode = RoutingMode.ON
    relevance_mode: RelevanceMode = RelevanceMode.LEXICAL
    style: RenderStyle = field(default_factory=lambda: RenderStyle.for_variant(StyleVariant.MINIMAL))
    placement: Placement = field(default_factory=lambda: Placement.parse("end-1"))
    instruction: str = DEFAULT_INSTRUCTION
    provider: ProviderSettings = ProviderSettings()
    cache_dir: str = ".g2f-cache"
    layout_engine: str = "builtin"  # "builtin" | "external"
    engine_binary: str = "dot"
    concurrency: int = 4
    digest_top_k: int = 10
    prompt_dir: str | None = None


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def _enum(enum_cls, raw, key):
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise ConfigError(f"{key} = {raw!r} not one of: {allowed}") from None


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Read a TOML config file; every key is optional and defaults apply."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    base_dir = path.parent

    p = _section(doc, "provider")
    models_doc = p.get("models", {})
    retry_doc = p.get("retry", {})
    retry_on = retry_doc.get("retry_on")
    script = p.get("script")
    if script is not None and not Path(script).is_absolute():
        script = str(base_dir / script)
    provider = ProviderSettings(
        backend=p.get("backend", "http"),
        script=script,
        models=ModelNames(
            builder=models_doc.get("builder", "gpt-4o"),
            router=models_doc.get("router", "gpt-4o-mini"),
            retrieval=models_doc.get("retrieval", "gpt-4o-mini"),
            answer=models_doc.get("answer", "gpt-4o"),
        ),
        retry=RetryPolicy(
            max_attempts=retry_doc.get("max_attempts", 3),
            base_backoff_ms=retry_doc.get("base_backoff_ms", 200),
            backoff_multiplier=retry_doc.get("backoff_multiplier", 2.0),
            retry_on=frozenset(_enum(FailureKind, k, "retry_on") for k in retry_on)
            if retry_on is not None
            else RetryPolicy().retry_on,
        ),
        rate_limit_per_minute=p.get("rate_limit_per_minute"),
    )
    if provider.backend not in ("http", "mock"):
        raise ConfigError(f"provider.backend = {provider.backend!r} must be 'http' or 'mock'")

    b = _section(doc, "builder")
    builder = BuilderConfig(
        frames_per_call=b.get("frames_per_call", 16),
        max_nodes=b.get("max_nodes", 120),
        max_edges=b.get("max_edges", 240),
        enrichment=_enum(Enrichment, b.get("enrichment", "full"), "builder.enrichment"),
        schema_detail=_enum(SchemaDetail, b.get("schema_detail", "full"), "builder.schema_detail"),
        builder_model=b.get("builder_model", provider.models.builder),
    )

    r = _section(doc, "retrieval")
    retrieval = RetrievalConfig(
        lambda_=r.get("lambda", 0.1),
        alpha=r.get("alpha", 1.0),
        beta=r.get("beta", 0.5),
        gamma=r.get("gamma", 0.25),
        n_max=r.get("n_max", 8),
        e_max=r.get("e_max", 12),
        seeds=r.get("seeds", 3),
        beam_width=r.get("beam_width", 1),
        require_connected=r.get("require_connected", True),
        allow_empty=r.get("allow_empty", True),
    )
    relevance_mode = _enum(RelevanceMode, r.get("mode", "Lexical"), "retrieval.mode")

    rt = _section(doc, "routing")
    weights = rt.get("factor_weights")
    routing = RoutingConfig(
        tau=rt.get("tau", 0.15),
        factor_weights=dict(weights) if weights is not None else RoutingConfig().factor_weights,
        confidence_floor=rt.get("confidence_floor", 0.4),
        max_retries=rt.get("max_retries", 1),
    )
    routing_mode = _enum(RoutingMode, rt.get("mode", "on"), "routing.mode")

    rd = _section(doc, "render")
    style = RenderStyle.for_variant(_enum(StyleVariant, rd.get("style", "Minimal"), "render.style"))
    if "min_font_px" in rd:
        style = replace(style, min_font_px=int(rd["min_font_px"]))
    layout_engine = rd.get("layout_engine", "builtin")
    if layout_engine not in ("builtin", "external"):
        raise ConfigError("render.layout_engine must be 'builtin' or 'external'")

    f = _section(doc, "fusion")
    placement = Placement.parse(f.get("placement", "end-1"))
    instruction = f.get("instruction", DEFAULT_INSTRUCTION)

    pl = _section(doc, "pipeline")
    cache_dir = pl.get("cache_dir", ".g2f-cache")
    if not Path(cache_dir).is_absolute():
        cache_dir = str(base_dir / cache_dir)
    prompt_dir = pl.get("prompt_dir")
    if prompt_dir is not None and not Path(prompt_dir).is_absolute():
        prompt_dir = str(base_dir / prompt_dir)

    return PipelineConfig(
        builder=builder,
        retrieval=retrieval,
        routing=routing,
        routing_mode=routing_mode,
        relevance_mode=relevance_mode,
        style=style,
        placement=placement,
        instruction=instruction,
        provider=provider,
        cache_dir=cache_dir,
        layout_engine=layout_engine,
        engine_binary=rd.get("engine_binary", "dot"),
        concurrency=pl.get("concurrency", 4),
        digest_top_k=pl.get("digest_top_k", 10),
        prompt_dir=prompt_dir,
    )


def make_client(settings: ProviderSettings) -> ProviderClient:
    """Build the provider client a config describes (mock script or HTTP env)."""
    if settings.backend == "mock":
        if not settings.script:
            raise ConfigError("provider.backend = 'mock' needs provider.script")
        backend = MockBackend.from_script_file(settings.script)
    else:
        backend = HttpBackend.from_env()
    limiter = (
        TokenBucket(settings.rate_limit_per_minute) if settings.rate_limit_per_minute else None
    )
    return ProviderClient(backend, retry=settings.retry, rate_limiter=limiter)


# Variant override keys understood by bench runs.
_VARIANT_KEYS = (
    "placement",
    "style",
    "routing",
    "n_max",
    "e_max",
    "lambda",
    "require_connected",
    "tau",
    "enrichment",
    "schema_detail",
)


def apply_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    """One bench variant: a dict of axis overrides applied to a base config."""
    unknown = set(overrides) - set(_VARIANT_KEYS)
    if unknown:
        raise ConfigError(f"unknown variant keys: {sorted(unknown)}")
    out = config
    if "placement" in overrides:
        out = replace(out, placement=Placement.parse(overrides["placement"]))
    if "style" in overrides:
        out = replace(out, style=RenderStyle.for_variant(_enum(StyleVariant, overrides["style"], "style")))
    if "routing" in overrides:
        out = replace(out, routing_mode=_enum(RoutingMode, overrides["routing"], "routing"))
    if "tau" in overrides:
        out = replace(out, routing=replace(out.routing, tau=float(overrides["tau"])))
    retrieval_updates = {}
    if "n_max" in overrides:
        retrieval_updates["n_max"] = int(overrides["n_max"])
    if "e_max" in overrides:
        retrieval_updates["e_max"] = int(overrides["e_max"])
    if "lambda" in overrides:
        retrieval_updates["lambda_"] = float(overrides["lambda"])
    if "require_connected" in overrides:
        retrieval_updates["require_connected"] = bool(overrides["require_connected"])
    if retrieval_updates:
        out = replace(out, retrieval=replace(out.retrieval, **retrieval_updates))
    builder_updates = {}
    if "enrichment" in overrides:
        builder_updates["enrichment"] = _enum(Enrichment, overrides["enrichment"], "enrichment")
    if "schema_detail" in overrides:
        builder_updates["schema_detail"] = _enum(SchemaDetail, overrides["schema_detail"], "schema_detail")
    if builder_updates:
        out = replace(out, builder=replace(out.builder, **builder_updates))
    return out
