"""Offline graph construction: prompt the provider over frame windows,
parse and repair its structured output, optionally enrich with external
knowledge, and cache the result per video.

The provider emits a line-oriented block (`NODE id kind "label" ...`,
`EDGE src -> dst kind "label" ...`) inside a code fence. Parsing is
forgiving: over-long labels are truncated, dangling/duplicate edges
dropped, causal cycles broken by removing the least-confident edge — and
every repair is recorded, never silent.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path

from filelock import FileLock

from .frames import FrameSet, media_type_for
from .graph import (
    EDGE_LABEL_MAX,
    NODE_ID_RE,
    NODE_LABEL_MAX,
    EdgeKind,
    GraphEdge,
    GraphNode,
    GraphSchemaError,
    NodeKind,
    Provenance,
    VideoKnowledgeGraph,
    deserialize,
    edge_key,
    serialize,
    validate,
)
from .provider import ImagePart, Message, ProviderClient, ProviderRequest, Role, TextPart

logger = logging.getLogger(__name__)

DEFAULT_EDGE_CONFIDENCE = 3


class BuilderError(Exception):
    pass


class UnparseableGraph(BuilderError):
    """Provider output had no usable structured block."""


class Enrichment(str, Enum):
    FULL = "full"
    NO_EXTERNAL = "no-external"


class SchemaDetail(str, Enum):
    FULL = "full"
    COARSE = "coarse"  # drops intent and affordances


@dataclass(frozen=True)
class BuilderConfig:
    frames_per_call: int = 16
    max_nodes: int = 120
    max_edges: int = 240
    enrichment: Enrichment = Enrichment.FULL
    schema_detail: SchemaDetail = SchemaDetail.FULL
    builder_model: str = "gpt-4o"

    def __post_init__(self):
        if self.frames_per_call < 1 or self.max_nodes < 1 or self.max_edges < 1:
            raise ValueError("frames_per_call, max_nodes and max_edges must be positive")

    def fingerprint(self) -> str:
        doc = {
            "frames_per_call": self.frames_per_call,
            "max_nodes": self.max_nodes,
            "max_edges": self.max_edges,
            "enrichment": self.enrichment.value,
            "schema_detail": self.schema_detail.value,
            "builder_model": self.builder_model,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Structured block parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Repair:
    kind: str
    subject: str
    detail: str = ""


@dataclass
class ParsedGraph:
    nodes: list[GraphNode] = field(default_factory=list)
    edges: list[GraphEdge] = field(default_factory=list)
    confidences: dict[tuple, int] = field(default_factory=dict)
    repairs: list[Repair] = field(default_factory=list)


_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_NODE_RE = re.compile(r'^NODE\s+(\S+)\s+(\S+)\s+"([^"]*)"\s*(.*)$')
_EDGE_RE = re.compile(r'^EDGE\s+(\S+)\s*->\s*(\S+)\s+(\S+)\s+"([^"]*)"\s*(.*)$')
_ATTR_RE = re.compile(r'(\w+)=("([^"]*)"|\S+)')


def _ellipsize(text: str, cap: int) -> str:
    return text if len(text) <= cap else text[: cap - 1] + "…"


def _normalize_id(raw: str) -> str:
    return re.sub(r"[^a-z0-9_]", "_", raw.lower())[:64]


def _parse_attrs(raw: str) -> dict[str, str]:
    out = {}
    for m in _ATTR_RE.finditer(raw):
        value = m.group(3) if m.group(3) is not None else m.group(2)
        out[m.group(1).lower()] = value
    return out


def _extract_block(text: str) -> str:
    blocks = _FENCE_RE.findall(text)
    if not blocks:
        raise UnparseableGraph("no fenced structured block in provider output")
    for block in blocks:
        if re.search(r"^\s*(NODE|EDGE)\s", block, re.MULTILINE):
            return block
    return blocks[0]


def _parse_frames_attr(raw: str) -> tuple[int, ...] | None:
    values = []
    for piece in raw.split(","):
        piece = piece.strip()
        if piece.lstrip("-").isdigit() and int(piece) >= 0:
            values.append(int(piece))
    if not values:
        return None
    return tuple(sorted(set(values)))


def parse_graph_block(text: str, known_nodes: dict[str, GraphNode] | None = None) -> ParsedGraph:
    """Parse the provider's fenced NODE/EDGE block, repairing as it goes.

    Repairs, in order: malformed lines dropped, labels truncated, dangling
    edges dropped, duplicate edges dropped, kind-incompatible edges dropped,
    causal cycles broken (least-confident edge first). Never fabricates a
    node: every output id appears in the input text. `known_nodes` lets
    edges reference nodes from earlier build windows without counting as
    dangling.
    """
    block = _extract_block(text)
    result = ParsedGraph()
    nodes_by_id: dict[str, GraphNode] = {}
    raw_edges: list[tuple[GraphEdge, int]] = []

    for line_no, line in enumerate(block.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        node_m = _NODE_RE.match(line)
        edge_m = _EDGE_RE.match(line)
        if node_m:
            raw_id, raw_kind, label, attr_text = node_m.groups()
            node_id = _normalize_id(raw_id)
            if not node_id or not NODE_ID_RE.match(node_id):
                result.repairs.append(Repair("BadNodeId", raw_id, f"line {line_no}: unusable id"))
                continue
            if node_id != raw_id:
                result.repairs.append(Repair("NodeIdNormalized", raw_id, f"-> {node_id}"))
            try:
                kind = NodeKind(raw_kind.capitalize() if raw_kind.islower() else raw_kind)
            except ValueError:
                result.repairs.append(Repair("UnknownKind", raw_id, f"node kind {raw_kind!r}"))
                continue
            if node_id in nodes_by_id:
                result.repairs.append(Repair("DuplicateNode", node_id, "kept first definition"))
                continue
            label = label.strip()
            if not label:
                label = node_id
                result.repairs.append(Repair("EmptyLabelDefaulted", node_id, "label set to id"))
            if len(label) > NODE_LABEL_MAX:
                label = _ellipsize(label, NODE_LABEL_MAX)
                result.repairs.append(Repair("LabelTruncated", node_id, f"to {NODE_LABEL_MAX} chars"))
            attrs = _parse_attrs(attr_text)
            intent = attrs.pop("intent", None)
            if intent is not None and kind not in (NodeKind.EVENT, NodeKind.ACTION):
                result.repairs.append(Repair("IntentDropped", node_id, f"intent on {kind.value}"))
                intent = None
            provenance = Provenance.EXTERNAL if attrs.pop("prov", "").lower() == "external" else Provenance.INTERNAL
            frames = _parse_frames_attr(attrs.pop("frames", ""))
            nodes_by_id[node_id] = GraphNode(
                id=node_id,
                kind=kind,
                label=label,
                intent=intent,
                attributes=attrs,
                provenance=provenance,
                evidence_frames=frames,
            )
        elif edge_m:
            raw_src, raw_dst, raw_kind, label, attr_text = edge_m.groups()
            try:
                kind = EdgeKind(raw_kind.capitalize() if raw_kind.islower() else raw_kind)
            except ValueError:
                result.repairs.append(Repair("UnknownKind", f"{raw_src}->{raw_dst}", f"edge kind {raw_kind!r}"))
                continue
            label = label.strip()
            if len(label) > EDGE_LABEL_MAX:
                label = _ellipsize(label, EDGE_LABEL_MAX)
                result.repairs.append(Repair("LabelTruncated", f"{raw_src}->{raw_dst}", f"to {EDGE_LABEL_MAX} chars"))
            attrs = _parse_attrs(attr_text)
            try:
                confidence = max(1, min(5, int(attrs.get("conf", DEFAULT_EDGE_CONFIDENCE))))
            except ValueError:
                confidence = DEFAULT_EDGE_CONFIDENCE
            provenance = Provenance.EXTERNAL if attrs.get("prov", "").lower() == "external" else Provenance.INTERNAL
            edge = GraphEdge(
                src=_normalize_id(raw_src),
                dst=_normalize_id(raw_dst),
                kind=kind,
                label=label,
                provenance=provenance,
            )
            raw_edges.append((edge, confidence))
        else:
            result.repairs.append(Repair("MalformedLine", f"line {line_no}", line[:60]))

    result.nodes = list(nodes_by_id.values())
    resolvable = dict(known_nodes or {})
    resolvable.update(nodes_by_id)
    _assemble_edges(result, resolvable, raw_edges)
    return result


def _assemble_edges(
    result: ParsedGraph,
    resolvable: dict[str, GraphNode],
    raw_edges: list[tuple[GraphEdge, int]],
) -> None:
    """Apply edge repairs in order: dangling, self-loop, duplicate, kind, cycles."""
    from .graph import _EDGE_KIND_RULES  # shared compatibility table

    kept: list[GraphEdge] = []
    seen: set[tuple] = set()
    for edge, confidence in raw_edges:
        subject = f"{edge.src}->{edge.dst}"
        if edge.src not in resolvable or edge.dst not in resolvable:
            result.repairs.append(Repair("DanglingEdge", subject, "endpoint missing"))
            continue
        if edge.src == edge.dst:
            result.repairs.append(Repair("SelfLoopDropped", subject, ""))
            continue
        if edge_key(edge) in seen:
            result.repairs.append(Repair("DuplicateEdge", subject, ""))
            continue
        rule = _EDGE_KIND_RULES.get(edge.kind)
        if rule is not None and not rule(resolvable[edge.src].kind, resolvable[edge.dst].kind):
            result.repairs.append(Repair("KindMismatchDropped", subject, edge.kind.value))
            continue
        seen.add(edge_key(edge))
        kept.append(edge)
        result.confidences[edge_key(edge)] = confidence

    result.edges = _break_causal_cycles(kept, result.confidences, result.repairs)


def _break_causal_cycles(
    edges: list[GraphEdge], confidences: dict[tuple, int], repairs: list[Repair]
) -> list[GraphEdge]:
    """Drop the least-confident edge of each causal cycle until acyclic.

    Confidence defaults to 3; ties drop the edge latest in canonical order.
    """
    edges = list(edges)
    while True:
        cycle_edges = _edges_in_causal_cycles(edges)
        if not cycle_edges:
            return edges
        min_conf = min(confidences.get(edge_key(e), DEFAULT_EDGE_CONFIDENCE) for e in cycle_edges)
        victims = [e for e in cycle_edges if confidences.get(edge_key(e), DEFAULT_EDGE_CONFIDENCE) == min_conf]
        victim = max(victims, key=edge_key)  # ties drop the canonically-last edge
        repairs.append(
            Repair(
                "CausalCycleBroken",
                f"{victim.src}->{victim.dst}",
                f"conf={confidences.get(edge_key(victim), DEFAULT_EDGE_CONFIDENCE)}",
            )
        )
        edges.remove(victim)


def _edges_in_causal_cycles(edges: list[GraphEdge]) -> list[GraphEdge]:
    causal = [e for e in edges if e.kind is EdgeKind.CAUSAL]
    if not causal:
        return []
    nodes = sorted({e.src for e in causal} | {e.dst for e in causal})
    index = {n: i for i, n in enumerate(nodes)}
    adj: list[list[int]] = [[] for _ in nodes]
    for e in causal:
        adj[index[e.src]].append(index[e.dst])

    # Tarjan SCC (iterative); edges inside a nontrivial SCC lie on a cycle.
    disc: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    counter = [0]
    comp: dict[int, int] = {}
    comp_count = [0]

    for root in range(len(nodes)):
        if root in disc:
            continue
        work = [(root, iter(adj[root]))]
        disc[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in disc:
                    disc[nxt] = low[nxt] = counter[0]
                    counter[0] += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(adj[nxt])))
                    advanced = True
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], disc[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[node])
            if low[node] == disc[node]:
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    comp[member] = comp_count[0]
                    if member == node:
                        break
                comp_count[0] += 1

    comp_sizes: dict[int, int] = {}
    for c in comp.values():
        comp_sizes[c] = comp_sizes.get(c, 0) + 1
    return [
        e
        for e in causal
        if comp[index[e.src]] == comp[index[e.dst]] and comp_sizes[comp[index[e.src]]] > 1
    ]


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------


def load_prompt(name: str, prompt_dir: str | Path | None = None) -> str:
    """Load a prompt template; prompt_dir overrides the packaged defaults."""
    if prompt_dir is not None:
        return (Path(prompt_dir) / name).read_text(encoding="utf-8")
    return (resources.files("g2frag") / "prompts" / name).read_text(encoding="utf-8")


def _known_nodes_text(nodes: dict[str, GraphNode]) -> str:
    if not nodes:
        return "(none yet)"
    return "\n".join(f"{nid} {n.kind.value} \"{n.label}\"" for nid, n in sorted(nodes.items()))


# ---------------------------------------------------------------------------
# Build
# ---------------------------------------------------------------------------


def _load_image(path: str) -> ImagePart:
    return ImagePart(data=Path(path).read_bytes(), media_type=media_type_for(path))


def build(
    frames: FrameSet,
    config: BuilderConfig,
    client: ProviderClient,
    prompt_dir: str | Path | None = None,
) -> VideoKnowledgeGraph:
    """Construct the video's knowledge graph through windowed provider calls.

    Frames go out in windows of frames_per_call with the running node list
    echoed for coreference; windows are merged by exact case-insensitive
    (kind, label) match. Full enrichment adds a second pass restricted to
    external Affordance/Concept knowledge.
    """
    window_template = load_prompt("builder_window.txt", prompt_dir)
    windows = [
        frames.frames[i : i + config.frames_per_call]
        for i in range(0, len(frames.frames), config.frames_per_call)
    ]

    nodes: dict[str, GraphNode] = {}
    merged: dict[tuple[str, str], str] = {}  # (kind, label.lower()) -> canonical id
    edges: list[GraphEdge] = []
    confidences: dict[tuple, int] = {}
    repairs: list[Repair] = []

    def absorb(parsed: ParsedGraph, force_internal: bool, allowed_kinds: set[NodeKind] | None = None):
        remap: dict[str, str] = {}
        for node in parsed.nodes:
            if allowed_kinds is not None and node.kind not in allowed_kinds:
                repairs.append(Repair("EnrichmentKindRejected", node.id, node.kind.value))
                continue
            if force_internal and node.provenance is Provenance.EXTERNAL:
                node = replace(node, provenance=Provenance.INTERNAL)
                repairs.append(Repair("ProvenanceRetagged", node.id, "External -> Internal"))
            merge_key = (node.kind.value, node.label.lower())
            existing = merged.get(merge_key)
            if existing is not None:
                remap[node.id] = existing
                continue
            if node.id in nodes:
                # id collides with a differently-labeled node from an earlier window
                suffix = 2
                while f"{node.id}_{suffix}"[:64] in nodes:
                    suffix += 1
                new_id = f"{node.id}_{suffix}"[:64]
                remap[node.id] = new_id
                node = replace(node, id=new_id)
            merged[merge_key] = node.id
            nodes[node.id] = node
        for edge in parsed.edges:
            provenance = Provenance.INTERNAL if force_internal else edge.provenance
            resolved = replace(
                edge,
                src=remap.get(edge.src, edge.src),
                dst=remap.get(edge.dst, edge.dst),
                provenance=provenance,
            )
            if force_internal and edge.provenance is Provenance.EXTERNAL:
                repairs.append(Repair("ProvenanceRetagged", f"{edge.src}->{edge.dst}", "External -> Internal"))
            edges.append(resolved)
            confidences[edge_key(resolved)] = parsed.confidences.get(edge_key(edge), DEFAULT_EDGE_CONFIDENCE)
        repairs.extend(parsed.repairs)

    force_internal = config.enrichment is Enrichment.NO_EXTERNAL
    for w, window in enumerate(windows):
        prompt = window_template.format(
            video_id=frames.video_id,
            window_index=w + 1,
            window_count=len(windows),
            known_nodes=_known_nodes_text(nodes),
        )
        parts: list = [_load_image(ref.path) for ref in window]
        parts.append(TextPart(prompt))
        request = ProviderRequest(
            model_name=config.builder_model,
            messages=(Message(Role.USER, tuple(parts)),),
            max_tokens=4096,
        )
        absorb(parse_graph_block(client.complete(request).text, known_nodes=nodes), force_internal)

    if config.enrichment is Enrichment.FULL:
        enrich_template = load_prompt("builder_enrich.txt", prompt_dir)
        prompt = enrich_template.format(video_id=frames.video_id, known_nodes=_known_nodes_text(nodes))
        request = ProviderRequest(
            model_name=config.builder_model,
            messages=(Message(Role.USER, (TextPart(prompt),)),),
            max_tokens=2048,
        )
        parsed = parse_graph_block(client.complete(request).text, known_nodes=nodes)
        # edge_key ignores provenance, so confidences keep their keys.
        parsed.nodes = [replace(n, provenance=Provenance.EXTERNAL) for n in parsed.nodes]
        parsed.edges = [replace(e, provenance=Provenance.EXTERNAL) for e in parsed.edges]
        absorb(parsed, force_internal=False, allowed_kinds={NodeKind.AFFORDANCE, NodeKind.CONCEPT})

    return _finalize(frames.video_id, nodes, edges, confidences, repairs, config)


def _finalize(
    video_id: str,
    nodes: dict[str, GraphNode],
    edges: list[GraphEdge],
    confidences: dict[tuple, int],
    repairs: list[Repair],
    config: BuilderConfig,
) -> VideoKnowledgeGraph:
    if config.schema_detail is SchemaDetail.COARSE:
        nodes = {
            nid: (replace(n, intent=None) if n.intent is not None else n)
            for nid, n in nodes.items()
            if n.kind is not NodeKind.AFFORDANCE
        }
        edges = [e for e in edges if e.kind is not EdgeKind.AFFORDS]

    if len(nodes) > config.max_nodes:
        keep = set(list(nodes)[: config.max_nodes])
        for nid in list(nodes):
            if nid not in keep:
                repairs.append(Repair("NodeCapExceeded", nid, f"max_nodes={config.max_nodes}"))
                del nodes[nid]

    # Drop edges orphaned by coarse filtering or node caps, then dedupe.
    kept_edges: list[GraphEdge] = []
    seen: set[tuple] = set()
    for e in edges:
        if e.src not in nodes or e.dst not in nodes:
            repairs.append(Repair("DanglingEdge", f"{e.src}->{e.dst}", "endpoint removed"))
            continue
        if edge_key(e) in seen:
            repairs.append(Repair("DuplicateEdge", f"{e.src}->{e.dst}", "cross-window duplicate"))
            continue
        seen.add(edge_key(e))
        kept_edges.append(e)

    if len(kept_edges) > config.max_edges:
        for e in kept_edges[config.max_edges :]:
            repairs.append(Repair("EdgeCapExceeded", f"{e.src}->{e.dst}", f"max_edges={config.max_edges}"))
        kept_edges = kept_edges[: config.max_edges]

    kept_edges = _break_causal_cycles(kept_edges, confidences, repairs)

    graph = VideoKnowledgeGraph.from_parts(
        video_id, nodes.values(), kept_edges, builder_fingerprint=config.fingerprint()
    )
    problems = validate(graph)
    if problems:
        raise UnparseableGraph(f"builder output unrecoverable: {problems[0]}")
    if repairs:
        logger.info("builder applied %d repairs for video %s", len(repairs), video_id)
    return graph


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def _safe_name(video_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", video_id)


def cache_path(cache_dir: str | Path, video_id: str) -> Path:
    return Path(cache_dir) / f"{_safe_name(video_id)}.graph.json"


def load_or_build(
    frames: FrameSet,
    config: BuilderConfig,
    cache_dir: str | Path,
    client: ProviderClient,
    prompt_dir: str | Path | None = None,
) -> tuple[VideoKnowledgeGraph, bool]:
    """Return the cached graph when fingerprints match, else build and cache.

    Writes are atomic (write-then-rename); a corrupted cache file is rebuilt
    with a warning, never a crash. Per-video builds are serialized by a lock
    file so concurrent callers cannot double-spend provider calls.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_path(cache_dir, frames.video_id)
    lock = FileLock(str(path) + ".lock")

    with lock:
        if path.exists():
            try:
                cached = deserialize(path.read_bytes())
                if cached.builder_fingerprint == config.fingerprint():
                    return cached, True
                logger.info(
                    "cache fingerprint mismatch for %s (%s != %s), rebuilding",
                    frames.video_id,
                    cached.builder_fingerprint,
                    config.fingerprint(),
                )
            except GraphSchemaError as exc:
                logger.warning("corrupted cache %s (%s), rebuilding", path, exc)

        graph = build(frames, config, client, prompt_dir=prompt_dir)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        tmp.write_bytes(serialize(graph))
        os.replace(tmp, path)
        return graph, False
