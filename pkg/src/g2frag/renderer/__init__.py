"""Reasoning-frame rendering: a retrieved subgraph becomes one image.

The frame uses a deterministic visual grammar — one glyph shape per node
kind, directed arrows for causal flow, dashed undirected lines for spatial
and cross-view relations — with style variants that trade label density
against structure. DOT text is the interchange format; layout is either the
built-in layered engine or an external DOT tool, and both feed the same
drawing backend so PNG and SVG stay in lockstep.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping

from ..graph import EdgeKind, GraphEdge, GraphNode, NodeKind, VideoKnowledgeGraph, edge_key
from ..retrieval import ScoredSubgraph
from . import draw
from .engine import LayoutToolMissing, external_layout
from .layout import FONT_UNITS, RenderEdge, RenderNode, layered_layout

__all__ = [
    "StyleVariant",
    "RenderStyle",
    "ReasoningFrame",
    "ReadabilityInfo",
    "RenderError",
    "EmptyAfterFilter",
    "LayoutToolMissing",
    "emit_dot",
    "render",
    "subgraph_digest",
]


class RenderError(Exception):
    pass


class EmptyAfterFilter(RenderError):
    """Nothing left to draw once the style's edge filter is applied."""


class StyleVariant(str, Enum):
    MINIMAL = "Minimal"
    TEXT_HEAVY = "TextHeavy"
    TOPOLOGY = "Topology"
    CAUSALITY = "Causality"
    ICONS_ONLY = "IconsOnly"


ALL_EDGE_KINDS = frozenset(EdgeKind)
_TOPOLOGY_KINDS = frozenset({EdgeKind.SPATIAL, EdgeKind.CROSSLINK})
_CAUSALITY_KINDS = frozenset(
    {EdgeKind.CAUSAL, EdgeKind.PRECONDITION, EdgeKind.POSTCONDITION, EdgeKind.PARTICIPATES}
)

_LABEL_CAPS = {
    StyleVariant.MINIMAL: 24,
    StyleVariant.TEXT_HEAVY: 200,
    StyleVariant.TOPOLOGY: 24,
    StyleVariant.CAUSALITY: 24,
    StyleVariant.ICONS_ONLY: 0,
}

DEFAULT_GLYPHS: dict[NodeKind, str] = {
    NodeKind.ENTITY: "box",
    NodeKind.EVENT: "ellipse",
    NodeKind.ACTION: "hexagon",
    NodeKind.LOCATION: "house",
    NodeKind.AFFORDANCE: "diamond",
    NodeKind.CONCEPT: "note",
}

# Spatial topology and cross-view links render without direction; everything
# else carries an arrow. Causal-order kinds drive the top-to-bottom layering.
UNDIRECTED_KINDS = frozenset({EdgeKind.SPATIAL, EdgeKind.CROSSLINK})
FLOW_KINDS = frozenset({EdgeKind.CAUSAL, EdgeKind.PRECONDITION, EdgeKind.POSTCONDITION})
DASHED_KINDS = frozenset({EdgeKind.PRECONDITION, EdgeKind.POSTCONDITION, EdgeKind.CROSSLINK})


@dataclass(frozen=True)
class RenderStyle:
    variant: StyleVariant
    node_label_cap: int
    edge_filter: frozenset[EdgeKind]
    glyph_map: Mapping[NodeKind, str]
    min_font_px: int = 14

    @classmethod
    def for_variant(cls, variant: StyleVariant | str) -> "RenderStyle":
        variant = StyleVariant(variant)
        if variant is StyleVariant.TOPOLOGY:
            edge_filter = _TOPOLOGY_KINDS
        elif variant is StyleVariant.CAUSALITY:
            edge_filter = _CAUSALITY_KINDS
        else:
            edge_filter = ALL_EDGE_KINDS
        return cls(
            variant=variant,
            node_label_cap=_LABEL_CAPS[variant],
            edge_filter=edge_filter,
            glyph_map=dict(DEFAULT_GLYPHS),
        )


@dataclass(frozen=True)
class ReadabilityInfo:
    effective_font_px: float
    label_cap: int
    warning: bool


@dataclass(frozen=True)
class ReasoningFrame:
    """A rendered subgraph: raster + vector + the DOT that produced them."""

    image: bytes  # PNG at exactly the video's frame dimensions
    vector: bytes  # SVG
    dot_source: str
    style: RenderStyle
    subgraph_digest: str
    width: int
    height: int
    readability: ReadabilityInfo


# ---------------------------------------------------------------------------
# Labels and filtering
# ---------------------------------------------------------------------------

_WRAP_CHARS = 26
_MAX_LINES = 8


def _ellipsize(text: str, cap: int) -> str:
    if cap <= 0:
        return ""
    if len(text) <= cap:
        return text
    return text[: cap - 1] + "…"


def _wrap(text: str) -> tuple[str, ...]:
    if not text:
        return ()
    lines: list[str] = []
    current = ""
    for word in text.split():
        candidate = f"{current} {word}".strip()
        if current and len(candidate) > _WRAP_CHARS:
            lines.append(current)
            current = word
        else:
            current = candidate
    if current:
        lines.append(current)
    if len(lines) > _MAX_LINES:
        lines = lines[:_MAX_LINES]
        lines[-1] = _ellipsize(lines[-1] + "…", _WRAP_CHARS)
    return tuple(lines)


def node_display_text(node: GraphNode, style: RenderStyle, cap: int | None = None) -> str:
    cap = style.node_label_cap if cap is None else cap
    if cap <= 0:
        return ""
    if style.variant is StyleVariant.TEXT_HEAVY:
        pieces = [node.label]
        if node.intent:
            pieces.append(f"intent: {node.intent}")
        pieces.extend(f"{k}: {v}" for k, v in sorted(node.attributes.items()))
        return _ellipsize(" | ".join(pieces), cap)
    return _ellipsize(node.label, cap)


def filtered_edges(subgraph: ScoredSubgraph, style: RenderStyle) -> tuple[GraphEdge, ...]:
    return tuple(e for e in subgraph.edges if e.kind in style.edge_filter)


def _check_nonempty(subgraph: ScoredSubgraph, style: RenderStyle) -> tuple[GraphEdge, ...]:
    if not subgraph.node_ids:
        raise EmptyAfterFilter("subgraph has no nodes")
    kept = filtered_edges(subgraph, style)
    if subgraph.edges and not kept:
        raise EmptyAfterFilter(
            f"style {style.variant.value} filtered out all {len(subgraph.edges)} edges"
        )
    return kept


def subgraph_digest(subgraph: ScoredSubgraph) -> str:
    doc = {
        "nodes": sorted(subgraph.node_ids),
        "edges": [list(edge_key(e)) for e in subgraph.edges],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# DOT emission
# ---------------------------------------------------------------------------


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def emit_dot(subgraph: ScoredSubgraph, graph: VideoKnowledgeGraph, style: RenderStyle) -> str:
    """Deterministic DOT text for the subgraph under the given style.

    Nodes appear in canonical id order with their glyph shape; causal-order
    edges are directed, spatial/cross-view edges are drawn without
    direction. Evidence frame indices never appear.
    """
    kept = _check_nonempty(subgraph, style)
    lines = [
        "digraph reasoning_frame {",
        "  rankdir=TB;",
        '  bgcolor="white";',
        f'  node [fontname="sans-serif" fontsize={style.min_font_px} style="filled" fillcolor="white" color="black"];',
        f'  edge [fontname="sans-serif" fontsize={max(6, style.min_font_px - 2)} color="black"];',
    ]
    for nid in sorted(subgraph.node_ids):
        node = graph.node(nid)
        shape = style.glyph_map.get(node.kind, "box")
        label = _dot_escape(node_display_text(node, style))
        lines.append(f'  "{nid}" [label="{label}" shape={shape}];')
    for edge in kept:
        attrs = []
        label = "" if style.node_label_cap <= 0 else edge.label
        attrs.append(f'label="{_dot_escape(label)}"')
        if edge.kind in UNDIRECTED_KINDS:
            attrs.append("dir=none")
        if edge.kind in DASHED_KINDS:
            attrs.append("style=dashed")
        if edge.kind is EdgeKind.CROSSLINK:
            attrs.append(f'color="{draw.ACCENT}"')
        lines.append(f'  "{edge.src}" -> "{edge.dst}" [{" ".join(attrs)}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _render_items(
    subgraph: ScoredSubgraph,
    graph: VideoKnowledgeGraph,
    style: RenderStyle,
    kept: tuple[GraphEdge, ...],
    cap: int,
) -> tuple[list[RenderNode], list[RenderEdge]]:
    nodes = []
    for nid in sorted(subgraph.node_ids):
        node = graph.node(nid)
        nodes.append(
            RenderNode(
                id=nid,
                shape=style.glyph_map.get(node.kind, "box"),
                label_lines=_wrap(node_display_text(node, style, cap=cap)),
            )
        )
    edges = [
        RenderEdge(
            src=e.src,
            dst=e.dst,
            directed=e.kind not in UNDIRECTED_KINDS,
            flow=e.kind in FLOW_KINDS,
            accent=e.kind is EdgeKind.CROSSLINK,
            dashed=e.kind in DASHED_KINDS,
            label="" if cap <= 0 else e.label,
        )
        for e in kept
    ]
    return nodes, edges


def render(
    subgraph: ScoredSubgraph,
    graph: VideoKnowledgeGraph,
    style: RenderStyle,
    target_width: int,
    target_height: int,
    engine: str = "builtin",
    engine_binary: str = "dot",
) -> ReasoningFrame:
    """Render the subgraph to exactly target_width x target_height.

    Content is scaled uniformly and centered on a white background. If the
    effective label font would land below style.min_font_px, the render is
    retried once with the label cap halved; a frame that still violates the
    floor is returned with readability.warning set.
    """
    if target_width < 1 or target_height < 1:
        raise ValueError("target dimensions must be positive")
    kept = _check_nonempty(subgraph, style)

    cap = style.node_label_cap
    attempted_style = style
    for attempt in (0, 1):
        attempted_style = replace(style, node_label_cap=cap)
        nodes, edges = _render_items(subgraph, graph, attempted_style, kept, cap)
        if engine == "external":
            dot_source = emit_dot(subgraph, graph, attempted_style)
            layout = external_layout(dot_source, {n.id: n for n in nodes}, edges, binary=engine_binary)
        else:
            dot_source = emit_dot(subgraph, graph, attempted_style)
            layout = layered_layout(nodes, edges)
        scale, dx, dy = draw.fit_transform(layout, target_width, target_height)
        effective_font = FONT_UNITS * scale
        if effective_font >= style.min_font_px or cap <= 1 or attempt == 1:
            break
        cap = max(1, cap // 2)

    placed = draw.transform_layout(layout, scale, dx, dy)
    font_px = FONT_UNITS * scale
    return ReasoningFrame(
        image=draw.png_bytes(placed, target_width, target_height, font_px),
        vector=draw.svg_bytes(placed, target_width, target_height, font_px),
        dot_source=dot_source,
        style=attempted_style,
        subgraph_digest=subgraph_digest(subgraph),
        width=target_width,
        height=target_height,
        readability=ReadabilityInfo(
            effective_font_px=effective_font,
            label_cap=cap,
            warning=effective_font < style.min_font_px,
        ),
    )
