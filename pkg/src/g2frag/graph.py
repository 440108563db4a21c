"""Video knowledge graph: typed nodes/edges, validation, canonical persistence.

The graph is built once per video and is immutable afterwards. It spans two
views — an event-causal view (events, actions, intent, pre/postconditions)
and a scene-affordance view (entities, locations, affordances, concepts) —
bound together by cross-link edges. Everything downstream (retrieval,
rendering) reads this structure and never mutates it.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum

NODE_ID_RE = re.compile(r"^[a-z0-9_]{1,64}$")
NODE_LABEL_MAX = 40
EDGE_LABEL_MAX = 24
SCHEMA_VERSION = 1


class NodeKind(str, Enum):
    ENTITY = "Entity"
    EVENT = "Event"
    ACTION = "Action"
    LOCATION = "Location"
    AFFORDANCE = "Affordance"
    CONCEPT = "Concept"


class EdgeKind(str, Enum):
    CAUSAL = "Causal"
    PRECONDITION = "Precondition"
    POSTCONDITION = "Postcondition"
    PARTICIPATES = "Participates"
    SPATIAL = "Spatial"
    AFFORDS = "Affords"
    ABSTRACTION = "Abstraction"
    CROSSLINK = "CrossLink"


class Provenance(str, Enum):
    INTERNAL = "Internal"
    EXTERNAL = "External"


# Node kinds forming the event-causal view vs the scene-affordance view.
EVENT_VIEW_KINDS = frozenset({NodeKind.EVENT, NodeKind.ACTION})
SCENE_VIEW_KINDS = frozenset(
    {NodeKind.ENTITY, NodeKind.LOCATION, NodeKind.AFFORDANCE, NodeKind.CONCEPT}
)


class GraphError(Exception):
    """Base class for graph-model errors."""


class NodeNotFoundError(GraphError):
    def __init__(self, node_id: str):
        super().__init__(f"node not found: {node_id!r}")
        self.node_id = node_id


class GraphSchemaError(GraphError):
    """Malformed persisted graph; `path` names the offending location."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.reason = message


@dataclass(frozen=True)
class GraphNode:
    """One node of the knowledge graph."""

    id: str
    kind: NodeKind
    label: str
    intent: str | None = None
    attributes: dict[str, str] = field(default_factory=dict)
    provenance: Provenance = Provenance.INTERNAL
    evidence_frames: tuple[int, ...] | None = None


@dataclass(frozen=True)
class GraphEdge:
    """One directed edge; `label` may be empty."""

    src: str
    dst: str
    kind: EdgeKind
    label: str = ""
    provenance: Provenance = Provenance.INTERNAL


def edge_key(edge: GraphEdge) -> tuple[str, str, str, str]:
    """Canonical sort key: (src, dst, kind, label)."""
    return (edge.src, edge.dst, edge.kind.value, edge.label)


@dataclass(frozen=True)
class VideoKnowledgeGraph:
    """Immutable per-video graph; edges are kept in canonical order."""

    video_id: str
    nodes: dict[str, GraphNode]
    edges: tuple[GraphEdge, ...]
    builder_fingerprint: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(sorted(self.edges, key=edge_key)))

    @classmethod
    def from_parts(
        cls,
        video_id: str,
        nodes,
        edges,
        builder_fingerprint: str = "",
        schema_version: int = SCHEMA_VERSION,
    ) -> "VideoKnowledgeGraph":
        return cls(
            video_id=video_id,
            nodes={n.id: n for n in nodes},
            edges=tuple(edges),
            builder_fingerprint=builder_fingerprint,
            schema_version=schema_version,
        )

    def node(self, node_id: str) -> GraphNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NodeNotFoundError(node_id) from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """One invariant violation. `subject` identifies the node/edge involved."""

    rule: str
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule}({self.subject}): {self.detail}" if self.detail else f"{self.rule}({self.subject})"


# Edge-kind compatibility: kind -> predicate over (src_kind, dst_kind).
# Kinds absent from this table carry no endpoint restriction.
_EDGE_KIND_RULES = {
    EdgeKind.PARTICIPATES: lambda s, d: s == NodeKind.ENTITY and d in EVENT_VIEW_KINDS,
    EdgeKind.AFFORDS: lambda s, d: s == NodeKind.ENTITY and d == NodeKind.AFFORDANCE,
    EdgeKind.SPATIAL: lambda s, d: s in (NodeKind.ENTITY, NodeKind.LOCATION)
    and d in (NodeKind.ENTITY, NodeKind.LOCATION),
    EdgeKind.ABSTRACTION: lambda s, d: d == NodeKind.CONCEPT,
    EdgeKind.CROSSLINK: lambda s, d: (s in EVENT_VIEW_KINDS and d in SCENE_VIEW_KINDS)
    or (s in SCENE_VIEW_KINDS and d in EVENT_VIEW_KINDS),
}


def _edge_subject(edge: GraphEdge) -> str:
    return f"{edge.src}->{edge.dst}:{edge.kind.value}"


def _causal_cycles(graph: VideoKnowledgeGraph) -> list[list[str]]:
    """Nontrivial strongly connected components of the Causal subgraph."""
    adj: dict[str, list[str]] = {nid: [] for nid in graph.nodes}
    for e in graph.edges:
        if e.kind is EdgeKind.CAUSAL and e.src in graph.nodes and e.dst in graph.nodes:
            adj[e.src].append(e.dst)

    # Iterative Tarjan SCC, deterministic over sorted node ids.
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    sccs: list[list[str]] = []

    for root in sorted(adj):
        if root in index:
            continue
        work = [(root, iter(adj[root]))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = low[nxt] = counter[0]
                    counter[0] += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(adj[nxt])))
                    advanced = True
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    comp.append(member)
                    if member == node:
                        break
                if len(comp) > 1:
                    sccs.append(sorted(comp))
    return sorted(sccs)


def validate(graph: VideoKnowledgeGraph) -> list[Violation]:
    """Return every invariant violation; an empty list means valid.

    Pure: never mutates and always yields the same report for the same graph.
    """
    out: list[Violation] = []

    if not graph.video_id:
        out.append(Violation("BadVideoId", "<graph>", "video_id is empty"))
    if graph.schema_version < 1:
        out.append(Violation("BadSchemaVersion", "<graph>", f"schema_version={graph.schema_version}"))

    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        if node.id != nid:
            out.append(Violation("NodeKeyMismatch", nid, f"keyed {nid!r} but node.id={node.id!r}"))
        if not NODE_ID_RE.match(node.id):
            out.append(Violation("BadNodeId", node.id, "must match [a-z0-9_]{1,64}"))
        label = node.label
        if not label or label != label.strip():
            out.append(Violation("BadLabel", node.id, "label must be trimmed and non-empty"))
        elif len(label) > NODE_LABEL_MAX:
            out.append(Violation("LabelTooLong", node.id, f"{len(label)} > {NODE_LABEL_MAX}"))
        if node.intent is not None and node.kind not in EVENT_VIEW_KINDS:
            out.append(Violation("UnexpectedIntent", node.id, f"intent on {node.kind.value} node"))
        if node.evidence_frames is not None:
            frames = node.evidence_frames
            if any(f < 0 for f in frames) or any(a >= b for a, b in zip(frames, frames[1:])):
                out.append(Violation("BadEvidenceFrames", node.id, "must be non-negative, strictly increasing"))

    seen_edges: set[tuple[str, str, str, str]] = set()
    for edge in graph.edges:
        subject = _edge_subject(edge)
        if edge.src == edge.dst:
            out.append(Violation("SelfLoopEdge", subject, "src == dst"))
        missing = [t for t in (edge.src, edge.dst) if t not in graph.nodes]
        if missing:
            out.append(Violation("DanglingEdge", subject, f"missing endpoint(s): {', '.join(missing)}"))
        if len(edge.label) > EDGE_LABEL_MAX:
            out.append(Violation("LabelTooLong", subject, f"{len(edge.label)} > {EDGE_LABEL_MAX}"))
        key = edge_key(edge)
        if key in seen_edges:
            out.append(Violation("DuplicateEdge", subject, "duplicate (src, dst, kind, label)"))
        seen_edges.add(key)
        rule = _EDGE_KIND_RULES.get(edge.kind)
        if rule is not None and not missing:
            src_kind = graph.nodes[edge.src].kind
            dst_kind = graph.nodes[edge.dst].kind
            if not rule(src_kind, dst_kind):
                out.append(
                    Violation("KindMismatch", subject, f"{edge.kind.value} forbids {src_kind.value}->{dst_kind.value}")
                )

    for cycle in _causal_cycles(graph):
        out.append(Violation("CausalCycle", ",".join(cycle), "Causal subgraph must be acyclic"))

    return out


# ---------------------------------------------------------------------------
# Persistence (canonical JSON)
# ---------------------------------------------------------------------------


def _node_doc(node: GraphNode) -> dict:
    doc: dict = {
        "id": node.id,
        "kind": node.kind.value,
        "label": node.label,
        "attributes": dict(sorted(node.attributes.items())),
        "provenance": node.provenance.value,
    }
    if node.intent is not None:
        doc["intent"] = node.intent
    if node.evidence_frames is not None:
        doc["evidence_frames"] = list(node.evidence_frames)
    return doc


def serialize(graph: VideoKnowledgeGraph) -> bytes:
    """Canonical JSON bytes: nodes sorted by id, edges by (src, dst, kind, label).

    Requires a valid graph; two calls on equal graphs produce identical bytes.
    """
    problems = validate(graph)
    if problems:
        raise ValueError(f"refusing to serialize invalid graph: {problems[0]}")
    doc = {
        "schema_version": graph.schema_version,
        "video_id": graph.video_id,
        "builder_fingerprint": graph.builder_fingerprint,
        "nodes": [_node_doc(graph.nodes[nid]) for nid in sorted(graph.nodes)],
        "edges": [
            {
                "src": e.src,
                "dst": e.dst,
                "kind": e.kind.value,
                "label": e.label,
                "provenance": e.provenance.value,
            }
            for e in graph.edges
        ],
    }
    return (json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


def _expect(doc, key: str, types, path: str):
    if not isinstance(doc, dict):
        raise GraphSchemaError(path, f"expected object, got {type(doc).__name__}")
    if key not in doc:
        raise GraphSchemaError(f"{path}.{key}", "missing required field")
    value = doc[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise GraphSchemaError(f"{path}.{key}", f"expected {types}, got {type(value).__name__}")
    return value


def _parse_enum(enum_cls, raw: str, path: str):
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise GraphSchemaError(path, f"{raw!r} not one of: {allowed}") from None


def deserialize(data: bytes) -> VideoKnowledgeGraph:
    """Parse canonical JSON; raises GraphSchemaError naming the offending path."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GraphSchemaError("$", f"not valid JSON: {exc}") from None

    version = _expect(doc, "schema_version", int, "$")
    if version != SCHEMA_VERSION:
        raise GraphSchemaError("$.schema_version", f"unknown schema_version {version}")
    video_id = _expect(doc, "video_id", str, "$")
    fingerprint = _expect(doc, "builder_fingerprint", str, "$")
    raw_nodes = _expect(doc, "nodes", list, "$")
    raw_edges = _expect(doc, "edges", list, "$")

    nodes: list[GraphNode] = []
    for i, nd in enumerate(raw_nodes):
        path = f"$.nodes[{i}]"
        node_id = _expect(nd, "id", str, path)
        kind = _parse_enum(NodeKind, _expect(nd, "kind", str, path), f"{path}.kind")
        label = _expect(nd, "label", str, path)
        attrs = _expect(nd, "attributes", dict, path)
        for k, v in attrs.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise GraphSchemaError(f"{path}.attributes", "keys and values must be strings")
        provenance = _parse_enum(Provenance, _expect(nd, "provenance", str, path), f"{path}.provenance")
        intent = nd.get("intent")
        if intent is not None and not isinstance(intent, str):
            raise GraphSchemaError(f"{path}.intent", "expected string")
        frames = nd.get("evidence_frames")
        if frames is not None:
            if not isinstance(frames, list) or any(not isinstance(f, int) or isinstance(f, bool) for f in frames):
                raise GraphSchemaError(f"{path}.evidence_frames", "expected list of integers")
            frames = tuple(frames)
        nodes.append(
            GraphNode(
                id=node_id,
                kind=kind,
                label=label,
                intent=intent,
                attributes=dict(attrs),
                provenance=provenance,
                evidence_frames=frames,
            )
        )

    edges: list[GraphEdge] = []
    for i, ed in enumerate(raw_edges):
        path = f"$.edges[{i}]"
        edges.append(
            GraphEdge(
                src=_expect(ed, "src", str, path),
                dst=_expect(ed, "dst", str, path),
                kind=_parse_enum(EdgeKind, _expect(ed, "kind", str, path), f"{path}.kind"),
                label=_expect(ed, "label", str, path),
                provenance=_parse_enum(Provenance, _expect(ed, "provenance", str, path), f"{path}.provenance"),
            )
        )

    node_ids = [n.id for n in nodes]
    if len(set(node_ids)) != len(node_ids):
        dup = sorted({nid for nid in node_ids if node_ids.count(nid) > 1})[0]
        raise GraphSchemaError("$.nodes", f"duplicate node id {dup!r}")

    graph = VideoKnowledgeGraph.from_parts(
        video_id, nodes, edges, builder_fingerprint=fingerprint, schema_version=version
    )
    problems = validate(graph)
    if problems:
        first = problems[0]
        raise GraphSchemaError(f"$.{first.subject}", f"invariant violated: {first.rule} {first.detail}".strip())
    return graph


# ---------------------------------------------------------------------------
# Traversal
# ---------------------------------------------------------------------------


class Direction(str, Enum):
    IN = "In"
    OUT = "Out"
    BOTH = "Both"


def neighbors(
    graph: VideoKnowledgeGraph,
    node_id: str,
    direction: Direction = Direction.BOTH,
    kinds: frozenset[EdgeKind] | set[EdgeKind] | None = None,
) -> list[tuple[GraphEdge, GraphNode]]:
    """Incident edges of `node_id` with the node on the far end, canonical order."""
    if node_id not in graph.nodes:
        raise NodeNotFoundError(node_id)
    out: list[tuple[GraphEdge, GraphNode]] = []
    for edge in graph.edges:
        if kinds is not None and edge.kind not in kinds:
            continue
        if edge.src == node_id and direction in (Direction.OUT, Direction.BOTH):
            other = graph.nodes.get(edge.dst)
            if other is not None:
                out.append((edge, other))
        elif edge.dst == node_id and direction in (Direction.IN, Direction.BOTH):
            other = graph.nodes.get(edge.src)
            if other is not None:
                out.append((edge, other))
    return out
