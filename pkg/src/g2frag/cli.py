"""`g2f` command line: build-graph, ask, retrieve, render, bench."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .builder import load_or_build
from .config import ConfigError, load_config, make_client
from .frames import load_frame_set
from .graph import GraphEdge, GraphNode, NodeKind, EdgeKind, VideoKnowledgeGraph, deserialize
from .pipeline import answer, bench
from .renderer import RenderStyle, StyleVariant, render
from .retrieval import (
    RelevanceModel,
    RelevanceMode,
    ScoredSubgraph,
    select_subgraph,
    subgraph_doc,
    subgraph_from_doc,
    subgraph_table,
)
from .router import RoutingMode

from dataclasses import replace


def _load_pipeline_config(args):
    config = load_config(getattr(args, "config", None))
    if getattr(args, "routing", None):
        config = replace(config, routing_mode=RoutingMode(args.routing))
    if getattr(args, "out", None):
        Path(args.out).mkdir(parents=True, exist_ok=True)
    return config


def _client_for(config):
    return make_client(config.provider)


def cmd_build_graph(args) -> int:
    config = _load_pipeline_config(args)
    frames = load_frame_set(args.frames)
    client = _client_for(config)
    graph, cache_hit = load_or_build(
        frames, config.builder, config.cache_dir, client, prompt_dir=config.prompt_dir
    )
    from .builder import cache_path

    print(f"video {graph.video_id}: {len(graph.nodes)} nodes, {len(graph.edges)} edges")
    print(f"cache {'hit' if cache_hit else 'write'}: {cache_path(config.cache_dir, graph.video_id)}")
    return 0


def cmd_ask(args) -> int:
    config = _load_pipeline_config(args)
    frames = load_frame_set(args.frames)
    client = _client_for(config)
    options = [o.strip() for o in args.options.split(",")] if args.options else None
    out_dir = args.out or None
    record = answer(
        args.question,
        options,
        frames,
        config,
        client,
        question_id=args.question_id or "",
        out_dir=out_dir,
    )
    print(f"route: {record.route.value}  fallbacks: {record.fallbacks}")
    if record.frame_path:
        print(f"reasoning frame: {record.frame_path}")
    print(f"answer: {record.parsed_answer or record.raw_reply}")
    if args.trace:
        for step in record.trace:
            print(json.dumps(step))
    return 0


def cmd_retrieve(args) -> int:
    config = _load_pipeline_config(args)
    graph = deserialize(Path(args.graph).read_bytes())
    client = _client_for(config) if config.relevance_mode is RelevanceMode.PROVIDER else None
    model = RelevanceModel(
        mode=config.relevance_mode, client=client, model_name=config.provider.models.retrieval
    )
    selection = select_subgraph(args.question, graph, model, config.retrieval)
    doc = subgraph_doc(selection, graph, q=args.question)
    print(subgraph_table(selection, graph))
    if args.out:
        out_path = Path(args.out) / "subgraph.json"
        out_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        print(f"\nwritten: {out_path}")
    else:
        print()
        print(json.dumps(doc, indent=2))
    return 0


def _graph_from_dump(doc: dict) -> tuple[VideoKnowledgeGraph, ScoredSubgraph]:
    """Reconstruct a render-ready graph+subgraph from a dump with embedded nodes."""
    nodes = [
        GraphNode(id=n["id"], kind=NodeKind(n["kind"]), label=n["label"]) for n in doc["nodes"]
    ]
    edges = [
        GraphEdge(src=e["src"], dst=e["dst"], kind=EdgeKind(e["kind"]), label=e["label"])
        for e in doc["edges"]
    ]
    graph = VideoKnowledgeGraph.from_parts(doc.get("video_id", "dump"), nodes, edges)
    return graph, subgraph_from_doc(doc, graph)


def cmd_render(args) -> int:
    config = _load_pipeline_config(args)
    doc = json.loads(Path(args.subgraph).read_text(encoding="utf-8"))
    if args.graph:
        graph = deserialize(Path(args.graph).read_bytes())
        selection = subgraph_from_doc(doc, graph)
    else:
        graph, selection = _graph_from_dump(doc)
    style = RenderStyle.for_variant(StyleVariant(args.style)) if args.style else config.style
    frame = render(
        selection,
        graph,
        style,
        args.width,
        args.height,
        engine=config.layout_engine,
        engine_binary=config.engine_binary,
    )
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / f"frame_{frame.subgraph_digest[:12]}_{style.variant.value.lower()}"
    Path(f"{stem}.dot").write_text(frame.dot_source, encoding="utf-8")
    Path(f"{stem}.svg").write_bytes(frame.vector)
    Path(f"{stem}.png").write_bytes(frame.image)
    print(f"written: {stem}.dot .svg .png ({frame.width}x{frame.height})")
    if frame.readability.warning:
        print(
            f"readability warning: effective font {frame.readability.effective_font_px:.1f}px "
            f"< {style.min_font_px}px"
        )
    return 0


def cmd_bench(args) -> int:
    config = _load_pipeline_config(args)
    variants = None
    if args.variants:
        raw = json.loads(Path(args.variants).read_text(encoding="utf-8"))
        if isinstance(raw, dict):
            raw = raw.get("variants", [])
        variants = [(item.pop("name", f"variant{i}"), item) for i, item in enumerate(raw)]
    report = bench(args.dataset, config, variants=variants, out_dir=args.out)
    print(report.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="g2f", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, routing=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="output directory for artifacts")
        if routing:
            p.add_argument("--routing", choices=[m.value for m in RoutingMode], help="routing mode override")

    p = sub.add_parser("build-graph", help="build and cache the video knowledge graph")
    p.add_argument("--frames", required=True, help="frames directory (with frames.json)")
    common(p, routing=False)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("ask", help="answer one question about a video")
    p.add_argument("--frames", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--options", help="comma-separated multiple-choice options")
    p.add_argument("--question-id", default="")
    p.add_argument("--trace", action="store_true", help="print decision trace as JSON lines")
    common(p)
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("retrieve", help="select and dump the query subgraph")
    p.add_argument("--graph", required=True, help="cached .graph.json file")
    p.add_argument("--question", required=True)
    common(p, routing=False)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("render", help="render a dumped subgraph to a reasoning frame")
    p.add_argument("--subgraph", required=True, help="subgraph dump JSON")
    p.add_argument("--graph", help="full graph file for richer labels")
    p.add_argument("--style", choices=[v.value for v in StyleVariant], help="visual style variant")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=360)
    common(p, routing=False)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="evaluate a JSONL dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variants", help="JSON file of variant overrides")
    common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
