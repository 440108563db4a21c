"""Query-to-subgraph retrieval: pick a compact, budget-bounded subgraph.

The selected subgraph maximizes relevance minus a complexity penalty,
relevance = sum of per-node query relevance plus a coherence bonus per
edge, complexity = a weighted count of nodes and edges. Budgets cap the
node and edge counts so the rendered frame stays readable. A brute-force
solver over small graphs serves as the exact reference for the greedy/beam
selector.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Iterable, Mapping

from .graph import EdgeKind, GraphEdge, VideoKnowledgeGraph, edge_key
from .provider import ProviderClient, text_request

BRUTE_FORCE_NODE_LIMIT = 12

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class RetrievalError(Exception):
    pass


class EmptyGraph(RetrievalError):
    pass


class GraphTooLarge(RetrievalError):
    def __init__(self, size: int):
        super().__init__(f"brute force capped at {BRUTE_FORCE_NODE_LIMIT} nodes, graph has {size}")
        self.size = size


class RelevanceMode(str, Enum):
    LEXICAL = "Lexical"
    PROVIDER = "Provider"


def tokenize(text: str) -> set[str]:
    """Lowercased, punctuation-stripped token set."""
    return set(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class RetrievalConfig:
    lambda_: float = 0.1  # complexity penalty weight
    alpha: float = 1.0  # per-node complexity
    beta: float = 0.5  # per-edge complexity
    gamma: float = 0.25  # per-edge coherence bonus
    n_max: int = 8
    e_max: int = 12
    seeds: int = 3
    beam_width: int = 1
    require_connected: bool = True
    allow_empty: bool = True

    def __post_init__(self):
        if min(self.lambda_, self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("weights must be >= 0")
        if self.n_max < 1 or self.e_max < 1 or self.seeds < 1 or self.beam_width < 1:
            raise ValueError("n_max, e_max, seeds and beam_width must be positive")

    def tightened(self) -> "RetrievalConfig":
        """Budgets halved (floor, min 1) for fallback retries."""
        return RetrievalConfig(
            lambda_=self.lambda_,
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            n_max=max(1, self.n_max // 2),
            e_max=max(1, self.e_max // 2),
            seeds=self.seeds,
            beam_width=self.beam_width,
            require_connected=self.require_connected,
            allow_empty=self.allow_empty,
        )


@dataclass(frozen=True)
class ScoredSubgraph:
    """A candidate subgraph with its scores; members reference the owning graph."""

    node_ids: frozenset[str]
    edges: tuple[GraphEdge, ...]
    relevance: float
    complexity: float
    objective: float
    connected: bool

    @property
    def empty(self) -> bool:
        return not self.node_ids


EMPTY_SELECTION_NODE_IDS: frozenset[str] = frozenset()


def empty_subgraph() -> ScoredSubgraph:
    return ScoredSubgraph(
        node_ids=EMPTY_SELECTION_NODE_IDS,
        edges=(),
        relevance=0.0,
        complexity=0.0,
        objective=0.0,
        connected=True,
    )


# ---------------------------------------------------------------------------
# Relevance models
# ---------------------------------------------------------------------------


@dataclass
class RelevanceModel:
    """Scores node relevance in [0, 1] lexically or via the provider.

    Lexical mode is the zero-cost deterministic default: relevance of a node
    is the fraction of query tokens found among the tokens of its label and
    attribute text. Provider mode batches all node labels into a single
    scoring call (and all edges into a second) to bound cost.
    """

    mode: RelevanceMode = RelevanceMode.LEXICAL
    client: ProviderClient | None = None
    model_name: str = ""

    def node_scores(self, q: str, graph: VideoKnowledgeGraph) -> dict[str, float]:
        if self.mode is RelevanceMode.LEXICAL:
            q_tokens = tokenize(q)
            if not q_tokens:
                return {nid: 0.0 for nid in graph.nodes}
            out = {}
            for nid in sorted(graph.nodes):
                node = graph.nodes[nid]
                text = " ".join([node.label, *node.attributes.keys(), *node.attributes.values()])
                out[nid] = len(q_tokens & tokenize(text)) / len(q_tokens)
            return out
        return self._provider_node_scores(q, graph)

    def edge_coherence(
        self, q: str, graph: VideoKnowledgeGraph, node_rel: Mapping[str, float]
    ) -> dict[tuple, float]:
        if self.mode is RelevanceMode.LEXICAL:
            return {
                edge_key(e): 1.0 if node_rel.get(e.src, 0.0) > 0 and node_rel.get(e.dst, 0.0) > 0 else 0.0
                for e in graph.edges
            }
        return self._provider_edge_scores(q, graph)

    def _require_client(self) -> ProviderClient:
        if self.client is None:
            raise RetrievalError("Provider relevance mode needs a configured client")
        return self.client

    def _provider_node_scores(self, q: str, graph: VideoKnowledgeGraph) -> dict[str, float]:
        client = self._require_client()
        lines = [f"{nid}: {graph.nodes[nid].label} ({graph.nodes[nid].kind.value})" for nid in sorted(graph.nodes)]
        prompt = (
            "Rate how relevant each graph node is to the question, from 0 to 1.\n"
            f"Question: {q}\n"
            "Nodes:\n" + "\n".join(lines) + "\n"
            "Reply with one line per node in the form `node_id: value`."
        )
        schema = sorted(graph.nodes)
        return client.complete_scored(text_request(self.model_name, None, prompt), schema)

    def _provider_edge_scores(self, q: str, graph: VideoKnowledgeGraph) -> dict[tuple, float]:
        client = self._require_client()
        if not graph.edges:
            return {}
        names = [f"e{i}" for i in range(len(graph.edges))]
        lines = [
            f"{name}: {graph.nodes[e.src].label} -[{e.kind.value}]-> {graph.nodes[e.dst].label}"
            for name, e in zip(names, graph.edges)
        ]
        prompt = (
            "Rate how useful each relation is for answering the question, from 0 to 1.\n"
            f"Question: {q}\n"
            "Relations:\n" + "\n".join(lines) + "\n"
            "Reply with one line per relation in the form `id: value`."
        )
        scores = client.complete_scored(text_request(self.model_name, None, prompt), names)
        return {edge_key(e): scores[name] for name, e in zip(names, graph.edges)}


@dataclass(frozen=True)
class RelevanceScores:
    """Per-query node relevance and edge coherence, computed once."""

    node_rel: dict[str, float]
    edge_coh: dict[tuple, float]


def compute_scores(q: str, graph: VideoKnowledgeGraph, model: RelevanceModel) -> RelevanceScores:
    node_rel = model.node_scores(q, graph)
    return RelevanceScores(node_rel=node_rel, edge_coh=model.edge_coherence(q, graph, node_rel))


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def score_parts(
    node_ids: Iterable[str],
    edges: Iterable[GraphEdge],
    scores: RelevanceScores,
    config: RetrievalConfig,
) -> tuple[float, float, float]:
    """(relevance, complexity, objective) for an explicit subgraph.

    Summation order is fixed (sorted nodes, canonical edges) so equal
    subgraphs always score bit-identically.
    """
    ids = sorted(set(node_ids))
    edge_list = sorted(edges, key=edge_key)
    relevance = sum(scores.node_rel.get(nid, 0.0) for nid in ids)
    relevance += config.gamma * sum(scores.edge_coh.get(edge_key(e), 0.0) for e in edge_list)
    complexity = config.alpha * len(ids) + config.beta * len(edge_list)
    return relevance, complexity, relevance - config.lambda_ * complexity


def score(
    q: str,
    subgraph: ScoredSubgraph,
    graph: VideoKnowledgeGraph,
    model: RelevanceModel,
    config: RetrievalConfig,
) -> tuple[float, float, float]:
    """Re-score an existing subgraph against a query."""
    scores = compute_scores(q, graph, model)
    return score_parts(subgraph.node_ids, subgraph.edges, scores, config)


# ---------------------------------------------------------------------------
# Selection machinery
# ---------------------------------------------------------------------------


def _induced_edges(node_set: frozenset[str], graph: VideoKnowledgeGraph) -> list[GraphEdge]:
    return [e for e in graph.edges if e.src in node_set and e.dst in node_set]


def _select_edges(
    node_set: frozenset[str],
    graph: VideoKnowledgeGraph,
    scores: RelevanceScores,
    config: RetrievalConfig,
) -> tuple[GraphEdge, ...]:
    """Induced edges truncated to the best e_max by coherence, canonical order."""
    induced = _induced_edges(node_set, graph)
    if len(induced) > config.e_max:
        induced = sorted(induced, key=lambda e: (-scores.edge_coh.get(edge_key(e), 0.0), edge_key(e)))
        induced = induced[: config.e_max]
    return tuple(sorted(induced, key=edge_key))


def _is_connected(node_set: frozenset[str], edges: Iterable[GraphEdge]) -> bool:
    if len(node_set) <= 1:
        return True
    parent = {nid: nid for nid in node_set}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in edges:
        if e.src in parent and e.dst in parent:
            ra, rb = find(e.src), find(e.dst)
            if ra != rb:
                parent[ra] = rb
    roots = {find(nid) for nid in node_set}
    return len(roots) == 1


@dataclass(frozen=True)
class _Candidate:
    node_ids: frozenset[str]
    edges: tuple[GraphEdge, ...]
    relevance: float
    complexity: float
    objective: float

    def sort_key(self) -> tuple:
        # Higher objective first, then fewer nodes, then node-id order.
        return (-self.objective, len(self.node_ids), tuple(sorted(self.node_ids)))


def _evaluate(
    node_set: frozenset[str],
    graph: VideoKnowledgeGraph,
    scores: RelevanceScores,
    config: RetrievalConfig,
) -> _Candidate:
    edges = _select_edges(node_set, graph, scores, config)
    relevance, complexity, objective = score_parts(node_set, edges, scores, config)
    return _Candidate(node_set, edges, relevance, complexity, objective)


def _finish(candidate: _Candidate) -> ScoredSubgraph:
    return ScoredSubgraph(
        node_ids=candidate.node_ids,
        edges=candidate.edges,
        relevance=candidate.relevance,
        complexity=candidate.complexity,
        objective=candidate.objective,
        connected=_is_connected(candidate.node_ids, candidate.edges),
    )


def _all_zero_fallback(
    graph: VideoKnowledgeGraph, scores: RelevanceScores, config: RetrievalConfig
) -> ScoredSubgraph:
    # No relevant knowledge: an empty selection tells the router to fall back.
    if config.allow_empty:
        return empty_subgraph()
    best = min ((_evaluate(frozenset({nid}), graph, scores, config) for nid in graph.nodes),
                key=_Candidate.sort_key)
    return _finish(best)


def brute_force_select(
    q: str,
    graph: VideoKnowledgeGraph,
    model: RelevanceModel,
    config: RetrievalConfig,
    scores: RelevanceScores | None = None,
) -> ScoredSubgraph:
    """Exact reference solver: enumerate every admissible node subset.

    Guarded to small graphs; ties break exactly like select_subgraph
    (fewer nodes, then node-id order).
    """
    if not graph.nodes:
        raise EmptyGraph("cannot select from an empty graph")
    if len(graph.nodes) > BRUTE_FORCE_NODE_LIMIT:
        raise GraphTooLarge(len(graph.nodes))
    if scores is None:
        scores = compute_scores(q, graph, model)
    if all(v <= 0 for v in scores.node_rel.values()):
        return _all_zero_fallback(graph, scores, config)

    ids = sorted(graph.nodes)
    best: _Candidate | None = None
    for size in range(1, min(config.n_max, len(ids)) + 1):
        for combo in combinations(ids, size):
            node_set = frozenset(combo)
            if config.require_connected and not _is_connected(node_set, _induced_edges(node_set, graph)):
                continue
            cand = _evaluate(node_set, graph, scores, config)
            if best is None or cand.sort_key() < best.sort_key():
                best = cand
    assert best is not None
    return _finish(best)


def select_subgraph(
    q: str,
    graph: VideoKnowledgeGraph,
    model: RelevanceModel,
    config: RetrievalConfig,
    scores: RelevanceScores | None = None,
) -> ScoredSubgraph:
    """Seeded greedy/beam selection under the node/edge budgets.

    Seeds are the top-relevance nodes; each seed grows by the neighbor with
    the best marginal objective gain (pure greedy, beam_width=1) or by beam
    expansion that also explores non-improving intermediate states
    (beam_width>1), which lets the search cross low-relevance bridge nodes.
    """
    if not graph.nodes:
        raise EmptyGraph("cannot select from an empty graph")
    if scores is None:
        scores = compute_scores(q, graph, model)
    if all(v <= 0 for v in scores.node_rel.values()):
        return _all_zero_fallback(graph, scores, config)

    adjacency: dict[str, set[str]] = {nid: set() for nid in graph.nodes}
    for e in graph.edges:
        adjacency[e.src].add(e.dst)
        adjacency[e.dst].add(e.src)

    ranked = sorted(graph.nodes, key=lambda nid: (-scores.node_rel[nid], nid))
    seed_ids = [nid for nid in ranked if scores.node_rel[nid] > 0][: config.seeds]

    evaluated: dict[frozenset[str], _Candidate] = {}

    def evaluate(node_set: frozenset[str]) -> _Candidate:
        cand = evaluated.get(node_set)
        if cand is None:
            cand = _evaluate(node_set, graph, scores, config)
            evaluated[node_set] = cand
        return cand

    def expansions(state: frozenset[str]) -> list[str]:
        if config.require_connected:
            frontier = set().union(*(adjacency[nid] for nid in state)) - state
        else:
            frontier = set(graph.nodes) - state
        return sorted(frontier)

    best: _Candidate | None = None
    for seed in seed_ids:
        beam = [evaluate(frozenset({seed}))]
        if best is None or beam[0].sort_key() < best.sort_key():
            best = beam[0]
        while beam:
            grown: dict[frozenset[str], _Candidate] = {}
            for state in beam:
                if len(state.node_ids) >= config.n_max:
                    continue
                for nid in expansions(state.node_ids):
                    new_set = state.node_ids | {nid}
                    if new_set in grown:
                        continue
                    cand = evaluate(new_set)
                    if config.beam_width == 1 and cand.objective <= state.objective:
                        continue  # pure greedy only follows positive gains
                    grown[new_set] = cand
            if not grown:
                break
            ranked_states = sorted(grown.values(), key=_Candidate.sort_key)
            beam = ranked_states[: config.beam_width]
            if beam[0].sort_key() < best.sort_key():
                best = beam[0]
            for cand in ranked_states[config.beam_width :]:
                if cand.sort_key() < best.sort_key():
                    best = cand

    if best is None:
        return _all_zero_fallback(graph, scores, config)
    return _finish(best)


# ---------------------------------------------------------------------------
# Evidence-trail dumps
# ---------------------------------------------------------------------------


def subgraph_doc(subgraph: ScoredSubgraph, graph: VideoKnowledgeGraph, q: str | None = None) -> dict:
    """JSON document for a selected subgraph (graph-model fragment + scores)."""
    doc = {
        "video_id": graph.video_id,
        "node_ids": sorted(subgraph.node_ids),
        "nodes": [
            {
                "id": nid,
                "kind": graph.nodes[nid].kind.value,
                "label": graph.nodes[nid].label,
            }
            for nid in sorted(subgraph.node_ids)
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "kind": e.kind.value, "label": e.label}
            for e in subgraph.edges
        ],
        "relevance": subgraph.relevance,
        "complexity": subgraph.complexity,
        "objective": subgraph.objective,
        "connected": subgraph.connected,
    }
    if q is not None:
        doc["question"] = q
    return doc


def subgraph_from_doc(doc: dict, graph: VideoKnowledgeGraph) -> ScoredSubgraph:
    """Rehydrate a dumped subgraph against its graph."""
    node_ids = frozenset(doc["node_ids"])
    missing = sorted(nid for nid in node_ids if nid not in graph.nodes)
    if missing:
        raise RetrievalError(f"subgraph references unknown nodes: {missing}")
    wanted = {(e["src"], e["dst"], e["kind"], e["label"]) for e in doc["edges"]}
    edges = tuple(e for e in graph.edges if edge_key(e) in wanted)
    if len(edges) != len(wanted):
        raise RetrievalError("subgraph references edges missing from the graph")
    return ScoredSubgraph(
        node_ids=node_ids,
        edges=edges,
        relevance=float(doc.get("relevance", 0.0)),
        complexity=float(doc.get("complexity", 0.0)),
        objective=float(doc.get("objective", 0.0)),
        connected=bool(doc.get("connected", _is_connected(node_ids, edges))),
    )


def subgraph_table(subgraph: ScoredSubgraph, graph: VideoKnowledgeGraph) -> str:
    """Human-readable evidence table."""
    lines = [
        f"{'node':<20} {'kind':<12} label",
        "-" * 56,
    ]
    for nid in sorted(subgraph.node_ids):
        node = graph.nodes[nid]
        lines.append(f"{nid:<20} {node.kind.value:<12} {node.label}")
    if subgraph.edges:
        lines.append("")
        lines.append(f"{'edge':<44} kind")
        lines.append("-" * 56)
        for e in subgraph.edges:
            arrow = f"{e.src} -> {e.dst}" + (f" ({e.label})" if e.label else "")
            lines.append(f"{arrow:<44} {e.kind.value}")
    lines.append("")
    lines.append(
        f"relevance={subgraph.relevance:.4f} complexity={subgraph.complexity:.4f} "
        f"objective={subgraph.objective:.4f} connected={subgraph.connected}"
    )
    return "\n".join(lines)
