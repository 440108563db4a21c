"""End-to-end orchestration: route, retrieve, render, fuse, answer.

Easy queries are answered straight from the video frames. Hard queries run
retrieval with budget fallback (halving budgets, then reverting to the easy
branch), render the selected subgraph, fuse it into the frame sequence and
answer on the fused input. Every transition lands in the record's trace so
an answer can be audited from its artifacts alone.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .builder import load_or_build
from .config import PipelineConfig, apply_overrides, make_client
from .frames import FrameSet, FrameSetError, load_frame_set
from .fusion import fuse, manifest_doc, to_provider_request
from .provider import ProviderClient, ProviderError, ProviderRequest, ProviderResponse, parse_scores
from .renderer import EmptyAfterFilter, LayoutToolMissing, RenderError, render
from .retrieval import (
    RelevanceModel,
    ScoredSubgraph,
    select_subgraph,
    subgraph_doc,
)
from .router import (
    FallbackAction,
    RouteLabel,
    RoutingMode,
    apply_budget_fallback,
    route,
)

logger = logging.getLogger(__name__)

_FALLBACK_STEPS = {"retry_tighter", "fall_easy", "render_fall_easy", "answer_fall_easy"}


class PipelineError(Exception):
    pass


class Unparseable(PipelineError):
    """Reply could not be mapped to an option letter; scored as incorrect."""


# ---------------------------------------------------------------------------
# Answer parsing
# ---------------------------------------------------------------------------

_LETTER_ONLY_RE = re.compile(r"^\s*\(?([A-Ea-e])\)?[.):\s]*$")
_ANSWER_IS_RE = re.compile(r"answer\s*(?:is|:)?\s*[\(\[]?([A-Ea-e])[\)\]\.\s:,]", re.IGNORECASE)
_ANSWER_IS_END_RE = re.compile(r"answer\s*(?:is|:)?\s*[\(\[]?([A-Ea-e])[\)\]]?\s*$", re.IGNORECASE)


def parse_choice(raw_reply: str, options: list[str]) -> str:
    """Extract the chosen option letter from a free-form reply.

    Priority: a reply that is just a letter, then an "answer is X" pattern,
    then an exact option-text match. Anything else raises Unparseable.
    """
    if not options:
        raise ValueError("parse_choice needs a non-empty options list")
    valid = {chr(ord("A") + i) for i in range(len(options))}

    m = _LETTER_ONLY_RE.match(raw_reply)
    if m and m.group(1).upper() in valid:
        return m.group(1).upper()
    m = _ANSWER_IS_RE.search(raw_reply) or _ANSWER_IS_END_RE.search(raw_reply)
    if m and m.group(1).upper() in valid:
        return m.group(1).upper()
    stripped = raw_reply.strip().lower().rstrip(".")
    for i, option in enumerate(options):
        if stripped == option.strip().lower().rstrip("."):
            return chr(ord("A") + i)
    raise Unparseable(f"cannot extract a choice from {raw_reply[:80]!r}")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class AnswerRecord:
    question_id: str
    route: RouteLabel
    fallbacks: int
    raw_reply: str
    parsed_answer: str
    unparseable: bool
    prompt_tokens: int
    completion_tokens: int
    wall_ms: int
    subgraph_digest: str | None = None
    frame_path: str | None = None
    trace: list[dict] = field(default_factory=list)

    def to_doc(self) -> dict:
        return {
            "question_id": self.question_id,
            "route": self.route.value,
            "fallbacks": self.fallbacks,
            "subgraph_digest": self.subgraph_digest,
            "frame_path": self.frame_path,
            "raw_reply": self.raw_reply,
            "parsed_answer": self.parsed_answer,
            "unparseable": self.unparseable,
            "provider_usage": {
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
            },
            "wall_ms": self.wall_ms,
        }


class _TrackingClient:
    """Per-question usage/call accounting around a shared client."""

    def __init__(self, inner: ProviderClient):
        self.inner = inner
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.calls = 0

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        response = self.inner.complete(request)
        self.calls += 1
        self.prompt_tokens += response.usage.prompt_tokens
        self.completion_tokens += response.usage.completion_tokens
        return response

    def complete_scored(self, request: ProviderRequest, score_schema) -> dict[str, float]:
        return parse_scores(self.complete(request).text, score_schema)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name) or "q"


# ---------------------------------------------------------------------------
# Single-question pipeline
# ---------------------------------------------------------------------------


def answer(
    q: str,
    options: list[str] | None,
    frames: FrameSet,
    config: PipelineConfig,
    client: ProviderClient,
    question_id: str = "",
    out_dir: str | Path | None = None,
) -> AnswerRecord:
    """Run the full state machine for one question and record the outcome."""
    started = time.monotonic()
    tracking = _TrackingClient(client)
    question_id = question_id or _safe_name(q[:32])
    models = config.provider.models

    graph, cache_hit = load_or_build(
        frames, config.builder, config.cache_dir, tracking, prompt_dir=config.prompt_dir
    )
    pipeline_trace: list[dict] = [
        {"step": "graph_ready", "cache_hit": cache_hit, "nodes": len(graph.nodes), "edges": len(graph.edges)}
    ]

    decision = route(
        q,
        frames,
        graph,
        config.routing,
        mode=config.routing_mode,
        client=tracking,
        model_name=models.router,
        digest_top_k=config.digest_top_k,
    )

    selection: ScoredSubgraph | None = None
    frame = None
    if decision.label is RouteLabel.HARD:
        model = RelevanceModel(mode=config.relevance_mode, client=tracking, model_name=models.retrieval)
        retrieval_config = config.retrieval
        while True:
            candidate = select_subgraph(q, graph, model, retrieval_config)
            outcome = apply_budget_fallback(decision, candidate, config.routing, retrieval_config)
            if outcome.action is FallbackAction.PROCEED:
                selection = candidate
                break
            if outcome.action is FallbackAction.RETRY_TIGHTER:
                retrieval_config = outcome.retrieval_config
                continue
            break  # FallEasy

        if selection is not None:
            try:
                frame = render(
                    selection,
                    graph,
                    config.style,
                    frames.width,
                    frames.height,
                    engine=config.layout_engine,
                    engine_binary=config.engine_binary,
                )
            except (EmptyAfterFilter, LayoutToolMissing, RenderError) as exc:
                decision.trace.append({"step": "render_fall_easy", "error": type(exc).__name__, "detail": str(exc)})
                frame = None

    frame_path: str | None = None
    if frame is not None:
        fused = fuse(frames, frame, config.placement, instruction=config.instruction)
        request = to_provider_request(fused, q, options, model_name=models.answer)
        if out_dir is not None:
            frame_path = _write_artifacts(out_dir, question_id, q, selection, frame, fused, graph)
        pipeline_trace.append(
            {
                "step": "fused",
                "placement": str(config.placement),
                "frames": len(fused.frames),
                "insert_indices": list(fused.insert_indices),
            }
        )
    else:
        request = to_provider_request(frames, q, options, model_name=models.answer)

    try:
        response = tracking.complete(request)
    except ProviderError as exc:
        if frame is None:
            raise
        # Hard-branch answering failed; the easy branch is the last resort.
        decision.trace.append({"step": "answer_fall_easy", "error": type(exc).__name__})
        response = tracking.complete(to_provider_request(frames, q, options, model_name=models.answer))

    unparseable = False
    if options:
        try:
            parsed = parse_choice(response.text, options)
        except Unparseable:
            parsed = ""
            unparseable = True
    else:
        parsed = response.text.strip()

    fallbacks = sum(1 for step in decision.trace if step.get("step") in _FALLBACK_STEPS)
    trace = pipeline_trace + decision.trace + [{"step": "answered", "parsed": parsed, "unparseable": unparseable}]
    record = AnswerRecord(
        question_id=question_id,
        route=decision.label,
        fallbacks=fallbacks,
        raw_reply=response.text,
        parsed_answer=parsed,
        unparseable=unparseable,
        prompt_tokens=tracking.prompt_tokens,
        completion_tokens=tracking.completion_tokens,
        wall_ms=int((time.monotonic() - started) * 1000),
        subgraph_digest=frame.subgraph_digest if frame is not None else None,
        frame_path=frame_path,
        trace=trace,
    )
    if out_dir is not None:
        _write_trace(out_dir, question_id, record)
    return record


def _write_artifacts(out_dir, question_id, q, selection, frame, fused, graph) -> str:
    out_dir = Path(out_dir)
    name = _safe_name(question_id)
    frames_dir = out_dir / "frames"
    subgraph_dir = out_dir / "subgraphs"
    fused_dir = out_dir / "fused"
    for d in (frames_dir, subgraph_dir, fused_dir):
        d.mkdir(parents=True, exist_ok=True)

    frame_path = frames_dir / f"{name}.png"
    frame_path.write_bytes(frame.image)
    (frames_dir / f"{name}.svg").write_bytes(frame.vector)
    (frames_dir / f"{name}.dot").write_text(frame.dot_source, encoding="utf-8")
    (subgraph_dir / f"{name}.json").write_text(
        json.dumps(subgraph_doc(selection, graph, q=q), indent=2) + "\n", encoding="utf-8"
    )
    (fused_dir / f"{name}.json").write_text(
        json.dumps(manifest_doc(fused, question_id, frame_path), indent=2) + "\n", encoding="utf-8"
    )
    return str(frame_path)


def _write_trace(out_dir, question_id, record: AnswerRecord) -> None:
    trace_dir = Path(out_dir) / "trace"
    trace_dir.mkdir(parents=True, exist_ok=True)
    path = trace_dir / f"{_safe_name(question_id)}.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        for step in record.trace:
            fh.write(json.dumps({"question_id": record.question_id, **step}) + "\n")


# ---------------------------------------------------------------------------
# Batch evaluation
# ---------------------------------------------------------------------------


@dataclass
class VariantReport:
    name: str
    rows: int = 0
    scored: int = 0
    correct: int = 0
    skipped: int = 0
    failures: int = 0
    easy: int = 0
    hard: int = 0
    fallback_count: int = 0
    unparseable_count: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_ms_total: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.scored if self.scored else 0.0

    def to_doc(self) -> dict:
        scored = max(1, self.scored)
        return {
            "variant": self.name,
            "rows": self.rows,
            "accuracy": self.accuracy,
            "correct": self.correct,
            "scored": self.scored,
            "skipped": self.skipped,
            "failures": self.failures,
            "easy_rate": self.easy / scored,
            "hard_rate": self.hard / scored,
            "fallback_count": self.fallback_count,
            "unparseable_count": self.unparseable_count,
            "mean_prompt_tokens": self.prompt_tokens / scored,
            "mean_completion_tokens": self.completion_tokens / scored,
            "mean_wall_ms": self.wall_ms_total / scored,
        }


@dataclass
class BenchReport:
    variants: list[VariantReport]

    def to_doc(self) -> dict:
        return {"variants": [v.to_doc() for v in self.variants]}

    def table(self) -> str:
        header = f"{'variant':<16} {'accuracy':>8} {'easy':>5} {'hard':>5} {'fallbacks':>9} {'unparse':>7}"
        lines = [header, "-" * len(header)]
        for v in self.variants:
            lines.append(
                f"{v.name:<16} {v.accuracy:>8.3f} {v.easy:>5} {v.hard:>5} {v.fallback_count:>9} {v.unparseable_count:>7}"
            )
        return "\n".join(lines)


def read_dataset(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PipelineError(f"{path}:{line_no}: invalid JSON: {exc}") from None
            for key in ("question_id", "video_id", "frames_dir", "question", "answer"):
                if key not in row:
                    raise PipelineError(f"{path}:{line_no}: missing {key!r}")
            rows.append(row)
    return rows


def _run_row(row: dict, config: PipelineConfig, client, dataset_dir: Path, out_dir: Path | None) -> dict:
    frames_dir = Path(row["frames_dir"])
    if not frames_dir.is_absolute():
        frames_dir = dataset_dir / frames_dir
    try:
        frames = load_frame_set(frames_dir)
    except FrameSetError as exc:
        return {"question_id": row["question_id"], "status": "skipped", "reason": "MissingAsset", "detail": str(exc)}
    try:
        record = answer(
            row["question"],
            row.get("options") or None,
            frames,
            config,
            client,
            question_id=row["question_id"],
            out_dir=out_dir,
        )
    except Exception as exc:  # crash-free batch: a row failure is a record
        logger.exception("row %s failed", row["question_id"])
        return {"question_id": row["question_id"], "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    truth = str(row["answer"]).strip()
    correct = record.parsed_answer.strip().lower() == truth.lower() and not record.unparseable
    doc = record.to_doc()
    doc.update(status="ok", correct=correct, expected=truth)
    return doc


def bench(
    dataset: str | Path,
    config: PipelineConfig,
    variants: list[tuple[str, dict]] | None = None,
    out_dir: str | Path | None = None,
    client: ProviderClient | None = None,
) -> BenchReport:
    """Run the pipeline over a JSONL dataset, optionally across variants.

    Each variant gets its own provider client (scripted mocks replay from
    the top). Rows run concurrently up to config.concurrency; one row's
    failure never aborts the batch.
    """
    rows = read_dataset(dataset)
    dataset_dir = Path(dataset).parent
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    variant_list = variants or [("default", {})]
    reports: list[VariantReport] = []
    for name, overrides in variant_list:
        variant_config = apply_overrides(config, overrides)
        variant_out = out_dir if len(variant_list) == 1 else (out_dir / _safe_name(name) if out_dir else None)
        variant_client = client if client is not None else make_client(variant_config.provider)

        report = VariantReport(name=name, rows=len(rows))
        with ThreadPoolExecutor(max_workers=max(1, variant_config.concurrency)) as pool:
            docs = list(
                pool.map(
                    lambda row: _run_row(row, variant_config, variant_client, dataset_dir, variant_out),
                    rows,
                )
            )
        for doc in docs:
            if doc.get("status") == "skipped":
                report.skipped += 1
                continue
            if doc.get("status") == "failed":
                report.failures += 1
                report.scored += 1
                continue
            report.scored += 1
            report.correct += 1 if doc["correct"] else 0
            report.easy += 1 if doc["route"] == "Easy" else 0
            report.hard += 1 if doc["route"] == "Hard" else 0
            report.fallback_count += doc["fallbacks"]
            report.unparseable_count += 1 if doc["unparseable"] else 0
            report.prompt_tokens += doc["provider_usage"]["prompt_tokens"]
            report.completion_tokens += doc["provider_usage"]["completion_tokens"]
            report.wall_ms_total += doc["wall_ms"]
        reports.append(report)

        if variant_out is not None:
            records_path = variant_out / "records.jsonl"
            variant_out.mkdir(parents=True, exist_ok=True)
            with records_path.open("w", encoding="utf-8") as fh:
                for doc in docs:
                    fh.write(json.dumps(doc) + "\n")
            (variant_out / "report.json").write_text(
                json.dumps(report.to_doc(), indent=2) + "\n", encoding="utf-8"
            )

    return BenchReport(variants=reports)
