"""Difficulty-aware routing: answer directly, or go through retrieval.

A query goes to the hard (retrieve-render-fuse) branch only when the
estimated utility edge of doing so clears a threshold margin, with a
confidence guard that falls back to the easy branch when the estimate
itself is shaky. Factor scores come from a cheap provider call over a text
digest of the graph — routing never looks at pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Mapping

from .frames import FrameSet
from .graph import VideoKnowledgeGraph
from .provider import ProviderClient, ProviderError, text_request
from .retrieval import RetrievalConfig, ScoredSubgraph, tokenize

FACTOR_NAMES = ("locality", "cross_scene", "external_knowledge", "reasoning_steps")
CONFIDENCE_FACTOR = "confidence"

DEFAULT_FACTOR_WEIGHTS: Mapping[str, float] = MappingProxyType(
    {
        "locality": -0.3,
        "cross_scene": 0.3,
        "external_knowledge": 0.4,
        "reasoning_steps": 0.3,
    }
)

_ROUTER_PROMPT = """\
You are deciding whether a video question needs external structured knowledge.

Question: {question}

Video: {frame_count} frames.
Knowledge graph digest:
{graph_digest}

Rate each factor from 0 to 1 and reply with exactly one `name: value` line per factor:
locality: how localized in the video the needed evidence is (1 = one spot)
cross_scene: how much the question spans multiple scenes or entities
external_knowledge: how much world knowledge beyond the pixels is needed
reasoning_steps: estimated reasoning steps, scaled as steps/5 capped at 1
confidence: your confidence in these ratings
"""


class RoutingMode(str, Enum):
    ON = "on"
    OFF = "off"
    ON_NO_FALLBACK = "on-no-fallback"


class RouteLabel(str, Enum):
    EASY = "Easy"
    HARD = "Hard"


@dataclass(frozen=True)
class RoutingConfig:
    tau: float = 0.15
    factor_weights: Mapping[str, float] = DEFAULT_FACTOR_WEIGHTS
    confidence_floor: float = 0.4
    max_retries: int = 1

    def __post_init__(self):
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ValueError("confidence_floor must be in [0, 1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class RoutingDecision:
    label: RouteLabel
    delta_u: float
    u_g2f: float
    u_base: float
    factors: dict[str, float]
    confidence: float
    fallback_applied: bool
    mode: RoutingMode
    trace: list[dict] = field(default_factory=list)

    def check(self, config: RoutingConfig) -> None:
        """Assert the decision invariant for its mode (used by tests)."""
        assert self.delta_u == self.u_g2f - self.u_base
        if self.mode is RoutingMode.OFF:
            assert self.label is RouteLabel.HARD
            return
        hard = self.delta_u >= config.tau and not self.fallback_applied
        if self.mode is RoutingMode.ON:
            hard = hard and self.confidence >= config.confidence_floor
        assert (self.label is RouteLabel.HARD) == hard


# ---------------------------------------------------------------------------
# Graph digest and heuristic factors
# ---------------------------------------------------------------------------


def graph_digest(graph: VideoKnowledgeGraph, top_k: int = 10) -> str:
    """Cheap text summary: node counts per kind plus the best-connected labels."""
    counts: dict[str, int] = {}
    degree: dict[str, int] = {nid: 0 for nid in graph.nodes}
    for node in graph.nodes.values():
        counts[node.kind.value] = counts.get(node.kind.value, 0) + 1
    for edge in graph.edges:
        degree[edge.src] += 1
        degree[edge.dst] += 1
    count_line = ", ".join(f"{kind}: {n}" for kind, n in sorted(counts.items())) or "empty graph"
    top = sorted(graph.nodes, key=lambda nid: (-degree[nid], nid))[:top_k]
    label_line = "; ".join(graph.nodes[nid].label for nid in top)
    return f"{count_line}\ntop nodes: {label_line}" if top else count_line


_REASONING_MARKERS = {"why", "how", "because", "cause", "before", "after", "order", "then", "first", "leads"}


def heuristic_factors(q: str, graph: VideoKnowledgeGraph) -> dict[str, float]:
    """Deterministic offline stand-in for provider-elicited factors."""
    q_tokens = tokenize(q)
    label_tokens: set[str] = set()
    matched_kinds: set[str] = set()
    for node in graph.nodes.values():
        node_tokens = tokenize(node.label)
        label_tokens |= node_tokens
        if q_tokens & node_tokens:
            matched_kinds.add(node.kind.value)
    overlap = len(q_tokens & label_tokens) / len(q_tokens) if q_tokens else 0.0
    steps_estimate = 1 + len(q_tokens & _REASONING_MARKERS)
    return {
        "locality": max(0.0, 1.0 - overlap),
        "cross_scene": min(1.0, len(matched_kinds) / 4.0),
        "external_knowledge": 1.0 - overlap,
        "reasoning_steps": min(1.0, steps_estimate / 5.0),
        "confidence": 0.5 + 0.5 * overlap,
    }


# ---------------------------------------------------------------------------
# Routing
# ---------------------------------------------------------------------------


def route(
    q: str,
    frames: FrameSet,
    graph: VideoKnowledgeGraph,
    config: RoutingConfig,
    mode: RoutingMode = RoutingMode.ON,
    client: ProviderClient | None = None,
    model_name: str = "",
    digest_top_k: int = 10,
) -> RoutingDecision:
    """Decide easy vs hard for one query.

    Mode `off` forces the hard branch for every query (forced-RAG
    experiment). Otherwise factor scores are elicited from the provider (or
    the offline heuristic when no client is configured); the weighted sum
    forms the utility margin, thresholded at tau with a confidence guard
    that `on-no-fallback` skips. Provider failure routes easy conservatively.
    """
    trace: list[dict] = []
    if mode is RoutingMode.OFF:
        trace.append({"step": "routing_off", "detail": "hard branch forced for all queries"})
        return RoutingDecision(
            label=RouteLabel.HARD,
            delta_u=0.0,
            u_g2f=0.0,
            u_base=0.0,
            factors={},
            confidence=1.0,
            fallback_applied=False,
            mode=mode,
            trace=trace,
        )

    schema = list(FACTOR_NAMES) + [CONFIDENCE_FACTOR]
    if client is None:
        factors = heuristic_factors(q, graph)
        trace.append({"step": "factors_heuristic", "factors": dict(factors)})
    else:
        prompt = _ROUTER_PROMPT.format(
            question=q,
            frame_count=len(frames),
            graph_digest=graph_digest(graph, top_k=digest_top_k),
        )
        try:
            factors = client.complete_scored(text_request(model_name, None, prompt), schema)
            trace.append({"step": "factors_elicited", "model": model_name, "factors": dict(factors)})
        except ProviderError as exc:
            trace.append({"step": "provider_unavailable", "error": type(exc).__name__, "detail": str(exc)})
            return RoutingDecision(
                label=RouteLabel.EASY,
                delta_u=0.0,
                u_g2f=0.0,
                u_base=0.0,
                factors={},
                confidence=0.0,
                fallback_applied=True,
                mode=mode,
                trace=trace,
            )

    confidence = factors.get(CONFIDENCE_FACTOR, 1.0)
    weighted = {name: config.factor_weights.get(name, 0.0) * factors[name] for name in FACTOR_NAMES}
    delta_u = sum(weighted[name] for name in FACTOR_NAMES)
    u_base = factors["locality"]
    u_g2f = u_base + delta_u
    trace.append(
        {
            "step": "utility",
            "weighted": weighted,
            "delta_u": delta_u,
            "u_base": u_base,
            "u_g2f": u_g2f,
            "tau": config.tau,
        }
    )

    fallback_applied = False
    if mode is RoutingMode.ON and confidence < config.confidence_floor:
        fallback_applied = True
        trace.append(
            {
                "step": "confidence_fallback",
                "confidence": confidence,
                "floor": config.confidence_floor,
            }
        )
    threshold_hard = delta_u >= config.tau
    trace.append({"step": "threshold", "hard": threshold_hard, "fallback_applied": fallback_applied})

    label = RouteLabel.HARD if threshold_hard and not fallback_applied else RouteLabel.EASY
    return RoutingDecision(
        label=label,
        delta_u=delta_u,
        u_g2f=u_g2f,
        u_base=u_base,
        factors={name: factors[name] for name in FACTOR_NAMES},
        confidence=confidence,
        fallback_applied=fallback_applied,
        mode=mode,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Budget fallback
# ---------------------------------------------------------------------------


class FallbackAction(str, Enum):
    PROCEED = "Proceed"
    RETRY_TIGHTER = "RetryTighter"
    FALL_EASY = "FallEasy"


@dataclass(frozen=True)
class FallbackOutcome:
    action: FallbackAction
    retrieval_config: RetrievalConfig | None = None


def apply_budget_fallback(
    decision: RoutingDecision,
    retrieval_result: ScoredSubgraph,
    routing_config: RoutingConfig,
    retrieval_config: RetrievalConfig,
) -> FallbackOutcome:
    """Check a retrieval result against its budgets; retries halve the budgets.

    Empty or over-budget subgraphs retry with n_max/e_max halved (floor,
    min 1) while retries remain, then fall back to the easy branch. The
    decision's trace records every transition.
    """
    if decision.label is not RouteLabel.HARD:
        raise ValueError("budget fallback only applies to hard-routed queries")

    over_budget = (
        len(retrieval_result.node_ids) > retrieval_config.n_max
        or len(retrieval_result.edges) > retrieval_config.e_max
    )
    if not retrieval_result.empty and not over_budget:
        decision.trace.append({"step": "budget_ok", "nodes": len(retrieval_result.node_ids), "edges": len(retrieval_result.edges)})
        return FallbackOutcome(FallbackAction.PROCEED)

    reason = "empty_subgraph" if retrieval_result.empty else "over_budget"
    retries_used = sum(1 for step in decision.trace if step.get("step") == "retry_tighter")
    if retries_used < routing_config.max_retries:
        tightened = retrieval_config.tightened()
        decision.trace.append(
            {
                "step": "retry_tighter",
                "reason": reason,
                "n_max": tightened.n_max,
                "e_max": tightened.e_max,
            }
        )
        return FallbackOutcome(FallbackAction.RETRY_TIGHTER, retrieval_config=tightened)
    decision.trace.append({"step": "fall_easy", "reason": reason, "retries_used": retries_used})
    return FallbackOutcome(FallbackAction.FALL_EASY)
