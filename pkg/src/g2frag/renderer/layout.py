"""Built-in layered layout: rank by causal order, barycenter ordering.

Produces deterministic coordinates in abstract units with straight-line
edges. One external layout tool can substitute for this module (see
engine.py); both feed the same drawing backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

FONT_UNITS = 16.0  # label font size at scale 1
LINE_H = 20.0
CHAR_W = 9.0
PAD_X = 14.0
PAD_Y = 10.0
MIN_NODE_W = 48.0
MIN_NODE_H = 36.0
H_GAP = 36.0
V_GAP = 56.0

# Extra room some glyph outlines need so the text stays inside.
_SHAPE_W_FACTOR = {"box": 1.0, "ellipse": 1.35, "hexagon": 1.35, "house": 1.1, "diamond": 1.6, "note": 1.1}
_SHAPE_H_FACTOR = {"box": 1.0, "ellipse": 1.2, "hexagon": 1.1, "house": 1.35, "diamond": 1.5, "note": 1.1}


@dataclass(frozen=True)
class RenderNode:
    id: str
    shape: str
    label_lines: tuple[str, ...]


@dataclass(frozen=True)
class RenderEdge:
    src: str
    dst: str
    directed: bool
    flow: bool  # participates in top-to-bottom rank ordering
    accent: bool
    dashed: bool
    label: str


@dataclass
class PlacedNode:
    id: str
    x: float  # top-left
    y: float
    w: float
    h: float
    shape: str
    label_lines: tuple[str, ...]

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2


@dataclass
class PlacedEdge:
    points: tuple[tuple[float, float], ...]
    directed: bool
    accent: bool
    dashed: bool
    label: str


@dataclass
class Layout:
    nodes: list[PlacedNode] = field(default_factory=list)
    edges: list[PlacedEdge] = field(default_factory=list)
    width: float = 0.0
    height: float = 0.0


def node_box(node: RenderNode) -> tuple[float, float]:
    longest = max((len(line) for line in node.label_lines), default=0)
    w = max(MIN_NODE_W, longest * CHAR_W + 2 * PAD_X) * _SHAPE_W_FACTOR.get(node.shape, 1.0)
    h = max(MIN_NODE_H, len(node.label_lines) * LINE_H + 2 * PAD_Y) * _SHAPE_H_FACTOR.get(node.shape, 1.0)
    return w, h


def _flow_ranks(nodes: list[RenderNode], edges: list[RenderEdge]) -> dict[str, int]:
    """Longest-path rank over flow edges; cycle back-edges contribute nothing."""
    preds: dict[str, list[str]] = {n.id: [] for n in nodes}
    for e in edges:
        if e.flow:
            preds[e.dst].append(e.src)

    rank: dict[str, int] = {}
    in_progress: set[str] = set()

    def visit(nid: str) -> int:
        if nid in rank:
            return rank[nid]
        if nid in in_progress:
            return 0  # cycle guard
        in_progress.add(nid)
        r = 0
        for p in sorted(preds[nid]):
            r = max(r, visit(p) + 1)
        in_progress.discard(nid)
        rank[nid] = r
        return r

    for n in sorted(nodes, key=lambda n: n.id):
        visit(n.id)

    # Pull nodes without flow constraints toward their neighbors.
    has_flow = {e.src for e in edges if e.flow} | {e.dst for e in edges if e.flow}
    adjacency: dict[str, list[str]] = {n.id: [] for n in nodes}
    for e in edges:
        adjacency[e.src].append(e.dst)
        adjacency[e.dst].append(e.src)
    for _ in range(2):
        for n in sorted(nodes, key=lambda n: n.id):
            if n.id in has_flow or not adjacency[n.id]:
                continue
            mean = sum(rank[other] for other in adjacency[n.id]) / len(adjacency[n.id])
            rank[n.id] = int(round(mean))

    low = min(rank.values(), default=0)
    return {nid: r - low for nid, r in rank.items()}


def _barycenter_order(
    layers: list[list[str]], adjacency: dict[str, list[str]], passes: int = 4
) -> list[list[str]]:
    position = {nid: i for layer in layers for i, nid in enumerate(layer)}

    def sweep(layer: list[str], reference: list[str]) -> list[str]:
        ref_pos = {nid: i for i, nid in enumerate(reference)}

        def key(nid: str):
            anchors = [ref_pos[a] for a in adjacency[nid] if a in ref_pos]
            bary = sum(anchors) / len(anchors) if anchors else position[nid]
            return (bary, nid)

        ordered = sorted(layer, key=key)
        for i, nid in enumerate(ordered):
            position[nid] = i
        return ordered

    for _ in range(passes):
        for i in range(1, len(layers)):
            layers[i] = sweep(layers[i], layers[i - 1])
        for i in range(len(layers) - 2, -1, -1):
            layers[i] = sweep(layers[i], layers[i + 1])
    return layers


def _border_point(node: PlacedNode, toward: tuple[float, float]) -> tuple[float, float]:
    """Intersection of the segment (center -> toward) with the node's bounding box."""
    cx, cy = node.cx, node.cy
    dx, dy = toward[0] - cx, toward[1] - cy
    if dx == 0 and dy == 0:
        return cx, cy
    tx = abs((node.w / 2) / dx) if dx else float("inf")
    ty = abs((node.h / 2) / dy) if dy else float("inf")
    t = min(tx, ty)
    return cx + dx * t, cy + dy * t


def layered_layout(nodes: list[RenderNode], edges: list[RenderEdge]) -> Layout:
    """Deterministic top-to-bottom layered drawing of the given items."""
    if not nodes:
        return Layout()

    ranks = _flow_ranks(nodes, edges)
    n_layers = max(ranks.values()) + 1
    layers: list[list[str]] = [[] for _ in range(n_layers)]
    for n in sorted(nodes, key=lambda n: n.id):
        layers[ranks[n.id]].append(n.id)

    adjacency: dict[str, list[str]] = {n.id: [] for n in nodes}
    for e in edges:
        adjacency[e.src].append(e.dst)
        adjacency[e.dst].append(e.src)
    layers = _barycenter_order(layers, adjacency)

    by_id = {n.id: n for n in nodes}
    sizes = {n.id: node_box(n) for n in nodes}

    layer_widths = [
        sum(sizes[nid][0] for nid in layer) + H_GAP * max(0, len(layer) - 1) for layer in layers
    ]
    total_w = max(layer_widths)

    placed: dict[str, PlacedNode] = {}
    y = 0.0
    for layer, lw in zip(layers, layer_widths):
        layer_h = max(sizes[nid][1] for nid in layer) if layer else 0.0
        x = (total_w - lw) / 2
        for nid in layer:
            w, h = sizes[nid]
            node = by_id[nid]
            placed[nid] = PlacedNode(
                id=nid, x=x, y=y + (layer_h - h) / 2, w=w, h=h, shape=node.shape, label_lines=node.label_lines
            )
            x += w + H_GAP
        y += layer_h + V_GAP
    total_h = y - V_GAP if layers else 0.0

    # Straight edges; parallel edges between the same pair get a small offset.
    pair_seen: dict[tuple[str, str], int] = {}
    placed_edges: list[PlacedEdge] = []
    for e in edges:
        a, b = placed[e.src], placed[e.dst]
        pair = (min(e.src, e.dst), max(e.src, e.dst))
        slot = pair_seen.get(pair, 0)
        pair_seen[pair] = slot + 1
        shift = (slot - 0) * 10.0 if slot else 0.0
        start = _border_point(a, (b.cx + shift, b.cy))
        end = _border_point(b, (a.cx + shift, a.cy))
        if shift:
            start = (start[0] + shift, start[1])
            end = (end[0] + shift, end[1])
        placed_edges.append(
            PlacedEdge(points=(start, end), directed=e.directed, accent=e.accent, dashed=e.dashed, label=e.label)
        )

    return Layout(
        nodes=[placed[nid] for layer in layers for nid in layer],
        edges=placed_edges,
        width=total_w,
        height=total_h,
    )
