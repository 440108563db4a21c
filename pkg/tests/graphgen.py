"""Seeded random valid-graph generation shared across test modules."""

from __future__ import annotations

import random

from g2frag.graph import (
    EdgeKind,
    GraphEdge,
    GraphNode,
    NodeKind,
    Provenance,
    VideoKnowledgeGraph,
    edge_key,
)

WORDS = [
    "cup", "table", "door", "kitchen", "water", "pour", "drink", "open",
    "walk", "hallway", "bottle", "shelf", "grasp", "handle", "sit", "chair",
    "light", "switch", "press", "carry", "enter", "room", "plant", "window",
]

_KINDS = list(NodeKind)


def _compatible_kinds(src: NodeKind, dst: NodeKind, forward: bool) -> list[EdgeKind]:
    """Edge kinds legal between two node kinds; Causal only when `forward`."""
    event = {NodeKind.EVENT, NodeKind.ACTION}
    scene = {NodeKind.ENTITY, NodeKind.LOCATION, NodeKind.AFFORDANCE, NodeKind.CONCEPT}
    kinds: list[EdgeKind] = [EdgeKind.PRECONDITION, EdgeKind.POSTCONDITION]
    if forward:
        kinds.append(EdgeKind.CAUSAL)
    if src == NodeKind.ENTITY and dst in event:
        kinds.append(EdgeKind.PARTICIPATES)
    if src == NodeKind.ENTITY and dst == NodeKind.AFFORDANCE:
        kinds.append(EdgeKind.AFFORDS)
    if src in (NodeKind.ENTITY, NodeKind.LOCATION) and dst in (NodeKind.ENTITY, NodeKind.LOCATION):
        kinds.append(EdgeKind.SPATIAL)
    if dst == NodeKind.CONCEPT:
        kinds.append(EdgeKind.ABSTRACTION)
    if (src in event and dst in scene) or (src in scene and dst in event):
        kinds.append(EdgeKind.CROSSLINK)
    return kinds


def random_graph(
    rng: random.Random,
    n_nodes: int,
    n_edges: int,
    video_id: str = "vid_random",
) -> VideoKnowledgeGraph:
    """A valid random graph: compatible edge kinds, acyclic causal subgraph."""
    nodes = []
    for i in range(n_nodes):
        kind = rng.choice(_KINDS)
        label = " ".join(rng.sample(WORDS, rng.randint(1, 2)))
        intent = rng.choice(WORDS) if kind in (NodeKind.EVENT, NodeKind.ACTION) and rng.random() < 0.3 else None
        attrs = {"detail": rng.choice(WORDS)} if rng.random() < 0.3 else {}
        nodes.append(
            GraphNode(id=f"n{i:02d}", kind=kind, label=label, intent=intent, attributes=attrs)
        )

    edges: list[GraphEdge] = []
    seen: set[tuple] = set()
    attempts = 0
    while len(edges) < n_edges and attempts < n_edges * 20:
        attempts += 1
        i, j = rng.sample(range(n_nodes), 2) if n_nodes > 1 else (0, 0)
        if i == j:
            continue
        src, dst = nodes[i], nodes[j]
        options = _compatible_kinds(src.kind, dst.kind, forward=i < j)
        if not options:
            continue
        kind = rng.choice(options)
        label = rng.choice(["", rng.choice(WORDS)])
        edge = GraphEdge(src=src.id, dst=dst.id, kind=kind, label=label)
        if edge_key(edge) in seen:
            continue
        seen.add(edge_key(edge))
        edges.append(edge)

    return VideoKnowledgeGraph.from_parts(video_id, nodes, edges)


def random_query(rng: random.Random, n_words: int = 4) -> str:
    return " ".join(rng.sample(WORDS, n_words))
