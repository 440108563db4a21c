"""External layout delegation: run a DOT layout tool behind a process boundary.

The tool only computes geometry (`-Tplain`); drawing still goes through the
shared backend so output dimensions and style stay under our control.
"""

from __future__ import annotations

import shlex
import subprocess

from .layout import Layout, PlacedEdge, PlacedNode, RenderEdge, RenderNode

POINTS_PER_INCH = 72.0


class LayoutToolMissing(Exception):
    def __init__(self, binary: str, detail: str = "not found"):
        super().__init__(f"layout tool {binary!r} {detail}")
        self.binary = binary


def run_layout_tool(dot_source: str, binary: str = "dot") -> str:
    try:
        proc = subprocess.run(
            [binary, "-Tplain"],
            input=dot_source.encode("utf-8"),
            capture_output=True,
            timeout=30,
        )
    except FileNotFoundError:
        raise LayoutToolMissing(binary) from None
    if proc.returncode != 0:
        raise LayoutToolMissing(binary, f"failed: {proc.stderr.decode('utf-8', 'replace')[:200]}")
    return proc.stdout.decode("utf-8")


def parse_plain(
    plain_text: str,
    node_items: dict[str, RenderNode],
    edge_items: list[RenderEdge],
) -> Layout:
    """Convert `dot -Tplain` output into a Layout (y flipped, inches -> units)."""
    graph_h = 0.0
    nodes: list[PlacedNode] = []
    raw_edges: list[tuple[str, str, tuple[tuple[float, float], ...]]] = []

    for line in plain_text.splitlines():
        fields = shlex.split(line)
        if not fields:
            continue
        if fields[0] == "graph":
            graph_h = float(fields[3])
        elif fields[0] == "node":
            name, cx, cy, w, h = fields[1], float(fields[2]), float(fields[3]), float(fields[4]), float(fields[5])
            item = node_items.get(name)
            if item is None:
                continue
            px, py = cx * POINTS_PER_INCH, (graph_h - cy) * POINTS_PER_INCH
            pw, ph = w * POINTS_PER_INCH, h * POINTS_PER_INCH
            nodes.append(
                PlacedNode(
                    id=name,
                    x=px - pw / 2,
                    y=py - ph / 2,
                    w=pw,
                    h=ph,
                    shape=item.shape,
                    label_lines=item.label_lines,
                )
            )
        elif fields[0] == "edge":
            tail, head, n = fields[1], fields[2], int(fields[3])
            coords = [float(v) for v in fields[4 : 4 + 2 * n]]
            points = tuple(
                (coords[i] * POINTS_PER_INCH, (graph_h - coords[i + 1]) * POINTS_PER_INCH)
                for i in range(0, len(coords), 2)
            )
            raw_edges.append((tail, head, points))

    # Re-attach style info: consume our edge items per (src, dst) pair in order.
    queues: dict[tuple[str, str], list[RenderEdge]] = {}
    for item in edge_items:
        queues.setdefault((item.src, item.dst), []).append(item)
    edges: list[PlacedEdge] = []
    for tail, head, points in raw_edges:
        queue = queues.get((tail, head)) or queues.get((head, tail))
        item = queue.pop(0) if queue else None
        if item is None:
            continue
        edges.append(
            PlacedEdge(
                points=points,
                directed=item.directed,
                accent=item.accent,
                dashed=item.dashed,
                label=item.label,
            )
        )

    width = max((n.x + n.w for n in nodes), default=0.0)
    height = max((n.y + n.h for n in nodes), default=0.0)
    return Layout(nodes=nodes, edges=edges, width=width, height=height)


def external_layout(
    dot_source: str,
    node_items: dict[str, RenderNode],
    edge_items: list[RenderEdge],
    binary: str = "dot",
) -> Layout:
    return parse_plain(run_layout_tool(dot_source, binary), node_items, edge_items)
