import random

import pytest

from g2frag.graph import (
    Direction,
    EdgeKind,
    GraphEdge,
    GraphNode,
    GraphSchemaError,
    NodeKind,
    NodeNotFoundError,
    Provenance,
    VideoKnowledgeGraph,
    deserialize,
    neighbors,
    serialize,
    validate,
)
from graphgen import random_graph


def node(nid, kind=NodeKind.ENTITY, label=None, **kw):
    return GraphNode(id=nid, kind=kind, label=label or nid, **kw)


def graph(nodes=(), edges=(), video_id="vid1", **kw):
    return VideoKnowledgeGraph.from_parts(video_id, nodes, edges, **kw)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def test_empty_graph_is_valid():
    assert validate(graph()) == []


def test_dangling_edge_reported():
    g = graph([node("a")], [GraphEdge("a", "ghost", EdgeKind.CAUSAL)])
    report = validate(g)
    assert len(report) == 1
    assert report[0].rule == "DanglingEdge"
    assert "ghost" in report[0].detail


def test_causal_cycle_reported_with_members():
    g = graph(
        [node("a", NodeKind.EVENT), node("b", NodeKind.EVENT)],
        [GraphEdge("a", "b", EdgeKind.CAUSAL), GraphEdge("b", "a", EdgeKind.CAUSAL)],
    )
    report = validate(g)
    cycles = [v for v in report if v.rule == "CausalCycle"]
    assert len(cycles) == 1
    assert set(cycles[0].subject.split(",")) == {"a", "b"}

    # Independent oracle: DFS reachability — a cycle exists iff some node
    # reaches itself through at least one causal edge.
    adj = {"a": ["b"], "b": ["a"]}

    def reaches_self(start):
        stack, seen = list(adj[start]), set()
        while stack:
            cur = stack.pop()
            if cur == start:
                return True
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(adj.get(cur, []))
        return False

    assert any(reaches_self(n) for n in adj)


def test_causal_chain_without_cycle_is_clean():
    g = graph(
        [node("a", NodeKind.EVENT), node("b", NodeKind.EVENT), node("c", NodeKind.EVENT)],
        [GraphEdge("a", "b", EdgeKind.CAUSAL), GraphEdge("b", "c", EdgeKind.CAUSAL)],
    )
    assert validate(g) == []


@pytest.mark.parametrize(
    "src_kind,dst_kind,edge_kind",
    [
        (NodeKind.EVENT, NodeKind.EVENT, EdgeKind.PARTICIPATES),
        (NodeKind.ENTITY, NodeKind.CONCEPT, EdgeKind.AFFORDS),
        (NodeKind.ENTITY, NodeKind.EVENT, EdgeKind.SPATIAL),
        (NodeKind.ENTITY, NodeKind.LOCATION, EdgeKind.ABSTRACTION),
        (NodeKind.ENTITY, NodeKind.LOCATION, EdgeKind.CROSSLINK),
        (NodeKind.EVENT, NodeKind.ACTION, EdgeKind.CROSSLINK),
    ],
)
def test_kind_incompatibility_flagged(src_kind, dst_kind, edge_kind):
    g = graph(
        [node("s", src_kind), node("d", dst_kind)],
        [GraphEdge("s", "d", edge_kind)],
    )
    assert any(v.rule == "KindMismatch" for v in validate(g))


@pytest.mark.parametrize(
    "src_kind,dst_kind,edge_kind",
    [
        (NodeKind.ENTITY, NodeKind.EVENT, EdgeKind.PARTICIPATES),
        (NodeKind.ENTITY, NodeKind.AFFORDANCE, EdgeKind.AFFORDS),
        (NodeKind.LOCATION, NodeKind.ENTITY, EdgeKind.SPATIAL),
        (NodeKind.ACTION, NodeKind.CONCEPT, EdgeKind.ABSTRACTION),
        (NodeKind.ACTION, NodeKind.LOCATION, EdgeKind.CROSSLINK),
        (NodeKind.ENTITY, NodeKind.EVENT, EdgeKind.CROSSLINK),
    ],
)
def test_kind_compatibility_allows(src_kind, dst_kind, edge_kind):
    g = graph([node("s", src_kind), node("d", dst_kind)], [GraphEdge("s", "d", edge_kind)])
    assert not any(v.rule == "KindMismatch" for v in validate(g))


def test_node_field_violations():
    bad = [
        GraphNode(id="UPPER", kind=NodeKind.ENTITY, label="x"),
        GraphNode(id="ok1", kind=NodeKind.ENTITY, label=" padded "),
        GraphNode(id="ok2", kind=NodeKind.ENTITY, label="y" * 41),
        GraphNode(id="ok3", kind=NodeKind.ENTITY, label="z", intent="nope"),
        GraphNode(id="ok4", kind=NodeKind.EVENT, label="w", evidence_frames=(3, 3)),
        GraphNode(id="ok5", kind=NodeKind.EVENT, label="v", evidence_frames=(-1, 2)),
    ]
    rules = {v.rule for v in validate(graph(bad))}
    assert rules == {"BadNodeId", "BadLabel", "LabelTooLong", "UnexpectedIntent", "BadEvidenceFrames"}


def test_self_loop_and_duplicate_edges():
    g = graph(
        [node("a"), node("b", NodeKind.LOCATION)],
        [
            GraphEdge("a", "a", EdgeKind.SPATIAL),
            GraphEdge("a", "b", EdgeKind.SPATIAL, "near"),
            GraphEdge("a", "b", EdgeKind.SPATIAL, "near"),
        ],
    )
    rules = [v.rule for v in validate(g)]
    assert rules.count("SelfLoopEdge") == 1
    assert rules.count("DuplicateEdge") == 1


def test_validate_is_pure():
    g = graph([node("a")], [GraphEdge("a", "ghost", EdgeKind.CAUSAL)])
    assert validate(g) == validate(g)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def sample_graph():
    return graph(
        [
            node("cup", NodeKind.ENTITY, "cup", attributes={"color": "red"}),
            node("pour", NodeKind.ACTION, "pour water", intent="fill the cup"),
            node("kitchen", NodeKind.LOCATION, "kitchen", evidence_frames=(2, 9)),
        ],
        [
            GraphEdge("cup", "pour", EdgeKind.PARTICIPATES),
            GraphEdge("cup", "kitchen", EdgeKind.SPATIAL, "on counter in"),
        ],
        builder_fingerprint="abc123",
    )


def test_empty_graph_round_trips():
    g = graph()
    assert deserialize(serialize(g)) == g


def test_serialize_is_deterministic():
    g = sample_graph()
    assert serialize(g) == serialize(g)


def test_round_trip_preserves_fields():
    g = sample_graph()
    g2 = deserialize(serialize(g))
    assert g2 == g
    assert g2.nodes["pour"].intent == "fill the cup"
    assert g2.nodes["kitchen"].evidence_frames == (2, 9)
    assert g2.builder_fingerprint == "abc123"


def test_canonical_bytes_independent_of_construction_order():
    g = sample_graph()
    nodes = list(g.nodes.values())[::-1]
    edges = list(g.edges)[::-1]
    shuffled = VideoKnowledgeGraph.from_parts("vid1", nodes, edges, builder_fingerprint="abc123")
    assert serialize(shuffled) == serialize(g)


def test_truncated_stream_is_schema_error():
    data = serialize(sample_graph())
    with pytest.raises(GraphSchemaError):
        deserialize(data[: len(data) // 2])


def test_serialize_rejects_invalid_graph():
    g = graph([node("a")], [GraphEdge("a", "ghost", EdgeKind.CAUSAL)])
    with pytest.raises(ValueError, match="DanglingEdge"):
        serialize(g)


@pytest.mark.parametrize(
    "mutate,path_fragment",
    [
        (lambda d: d.__setitem__("schema_version", 99), "schema_version"),
        (lambda d: d.pop("video_id"), "video_id"),
        (lambda d: d["nodes"][0].pop("label"), "nodes[0]"),
        (lambda d: d["nodes"][0].__setitem__("kind", "Widget"), "nodes[0].kind"),
        (lambda d: d["edges"][0].__setitem__("src", 5), "edges[0].src"),
        (lambda d: d["nodes"][1].__setitem__("evidence_frames", ["x"]), "evidence_frames"),
    ],
)
def test_schema_errors_name_offending_path(mutate, path_fragment):
    import json

    doc = json.loads(serialize(sample_graph()))
    mutate(doc)
    with pytest.raises(GraphSchemaError) as exc_info:
        deserialize(json.dumps(doc).encode())
    assert path_fragment in exc_info.value.path


def test_random_graphs_round_trip():
    rng = random.Random(7)
    for _ in range(25):
        g = random_graph(rng, rng.randint(0, 20), rng.randint(0, 30))
        data = serialize(g)
        assert deserialize(data) == g
        assert serialize(deserialize(data)) == data


# ---------------------------------------------------------------------------
# Neighbors
# ---------------------------------------------------------------------------


def hub_graph():
    return graph(
        [node("hub"), node("x", NodeKind.LOCATION), node("y", NodeKind.LOCATION), node("z", NodeKind.EVENT)],
        [
            GraphEdge("hub", "x", EdgeKind.SPATIAL),
            GraphEdge("hub", "y", EdgeKind.SPATIAL),
            GraphEdge("hub", "z", EdgeKind.PARTICIPATES),
            GraphEdge("y", "hub", EdgeKind.SPATIAL, "behind"),
        ],
    )


def test_isolated_node_has_no_neighbors():
    g = graph([node("a"), node("b")], [])
    assert neighbors(g, "a") == []


def test_out_neighbors_in_canonical_order():
    g = hub_graph()
    result = neighbors(g, "hub", Direction.OUT)
    assert [(e.src, e.dst) for e, _ in result] == [("hub", "x"), ("hub", "y"), ("hub", "z")]
    assert [n.id for _, n in result] == ["x", "y", "z"]


def test_both_direction_counts_each_incidence_once():
    g = graph([node("a"), node("b", NodeKind.LOCATION)], [GraphEdge("a", "b", EdgeKind.SPATIAL)])
    assert len(neighbors(g, "a", Direction.BOTH)) == 1
    assert len(neighbors(g, "b", Direction.BOTH)) == 1


def test_neighbors_kind_filter():
    g = hub_graph()
    spatial_only = neighbors(g, "hub", Direction.BOTH, kinds={EdgeKind.SPATIAL})
    assert all(e.kind is EdgeKind.SPATIAL for e, _ in spatial_only)
    assert len(spatial_only) == 3


def test_unknown_node_raises():
    with pytest.raises(NodeNotFoundError):
        neighbors(graph([node("a")]), "nope")
