"""Shared drawing backend: one geometry, two outputs (SVG text, PNG bytes).

Both backends walk the same transformed layout so the raster image and the
vector file always agree. All coordinates are emitted with fixed precision
and a bundled scalable font, keeping byte output deterministic.
"""

from __future__ import annotations

import io

from PIL import Image, ImageDraw, ImageFont

from .layout import FONT_UNITS, Layout, PlacedEdge, PlacedNode

STROKE = "black"
ACCENT = "#0b6e99"
ARROW_SIZE = 9.0
EDGE_FONT_RATIO = 0.8


def _f(v: float) -> str:
    return f"{v:.2f}"


def fit_transform(
    layout: Layout, width: int, height: int, max_scale: float = 3.0
) -> tuple[float, float, float]:
    """(scale, dx, dy) fitting the layout centered into width x height."""
    margin = max(8.0, 0.04 * min(width, height))
    if layout.width <= 0 or layout.height <= 0:
        return 1.0, width / 2, height / 2
    scale = min((width - 2 * margin) / layout.width, (height - 2 * margin) / layout.height, max_scale)
    dx = (width - layout.width * scale) / 2
    dy = (height - layout.height * scale) / 2
    return scale, dx, dy


def transform_layout(layout: Layout, scale: float, dx: float, dy: float) -> Layout:
    nodes = [
        PlacedNode(
            id=n.id,
            x=n.x * scale + dx,
            y=n.y * scale + dy,
            w=n.w * scale,
            h=n.h * scale,
            shape=n.shape,
            label_lines=n.label_lines,
        )
        for n in layout.nodes
    ]
    edges = [
        PlacedEdge(
            points=tuple((x * scale + dx, y * scale + dy) for x, y in e.points),
            directed=e.directed,
            accent=e.accent,
            dashed=e.dashed,
            label=e.label,
        )
        for e in layout.edges
    ]
    return Layout(nodes=nodes, edges=edges, width=layout.width * scale, height=layout.height * scale)


def _shape_polygon(node: PlacedNode) -> list[tuple[float, float]] | None:
    """Polygon outline for non-rect, non-ellipse glyphs."""
    x, y, w, h = node.x, node.y, node.w, node.h
    if node.shape == "hexagon":
        inset = min(w * 0.18, h * 0.6)
        return [
            (x + inset, y),
            (x + w - inset, y),
            (x + w, y + h / 2),
            (x + w - inset, y + h),
            (x + inset, y + h),
            (x, y + h / 2),
        ]
    if node.shape == "house":
        roof = h * 0.3
        return [
            (x, y + roof),
            (x + w / 2, y),
            (x + w, y + roof),
            (x + w, y + h),
            (x, y + h),
        ]
    if node.shape == "diamond":
        return [(x + w / 2, y), (x + w, y + h / 2), (x + w / 2, y + h), (x, y + h / 2)]
    if node.shape == "note":
        fold = min(w, h) * 0.22
        return [
            (x, y),
            (x + w - fold, y),
            (x + w, y + fold),
            (x + w, y + h),
            (x, y + h),
        ]
    return None


def _arrow_head(points: tuple[tuple[float, float], ...]) -> list[tuple[float, float]]:
    (x1, y1), (x2, y2) = points[-2], points[-1]
    dx, dy = x2 - x1, y2 - y1
    length = (dx * dx + dy * dy) ** 0.5 or 1.0
    ux, uy = dx / length, dy / length
    px, py = -uy, ux
    base_x, base_y = x2 - ux * ARROW_SIZE, y2 - uy * ARROW_SIZE
    half = ARROW_SIZE * 0.45
    return [(x2, y2), (base_x + px * half, base_y + py * half), (base_x - px * half, base_y - py * half)]


def _edge_label_pos(e: PlacedEdge) -> tuple[float, float]:
    (x1, y1), (x2, y2) = e.points[0], e.points[-1]
    return (x1 + x2) / 2 + 6.0, (y1 + y2) / 2 - 6.0


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------


def _svg_escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def svg_bytes(layout: Layout, width: int, height: int, font_px: float) -> bytes:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    edge_font = font_px * EDGE_FONT_RATIO

    for e in layout.edges:
        color = ACCENT if e.accent else STROKE
        dash = ' stroke-dasharray="6,4"' if e.dashed else ""
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in e.points)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
        if e.directed:
            head = " ".join(f"{_f(x)},{_f(y)}" for x, y in _arrow_head(e.points))
            parts.append(f'<polygon points="{head}" fill="{color}" stroke="none"/>')
        if e.label:
            lx, ly = _edge_label_pos(e)
            parts.append(
                f'<text x="{_f(lx)}" y="{_f(ly)}" font-family="sans-serif" font-size="{_f(edge_font)}" '
                f'fill="{color}">{_svg_escape(e.label)}</text>'
            )

    for n in layout.nodes:
        if n.shape == "ellipse":
            parts.append(
                f'<ellipse cx="{_f(n.cx)}" cy="{_f(n.cy)}" rx="{_f(n.w / 2)}" ry="{_f(n.h / 2)}" '
                f'fill="white" stroke="{STROKE}" stroke-width="2"/>'
            )
        else:
            polygon = _shape_polygon(n)
            if polygon is None:
                parts.append(
                    f'<rect x="{_f(n.x)}" y="{_f(n.y)}" width="{_f(n.w)}" height="{_f(n.h)}" '
                    f'fill="white" stroke="{STROKE}" stroke-width="2"/>'
                )
            else:
                pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in polygon)
                parts.append(f'<polygon points="{pts}" fill="white" stroke="{STROKE}" stroke-width="2"/>')
        n_lines = len(n.label_lines)
        for i, line in enumerate(n.label_lines):
            ly = n.cy + (i - (n_lines - 1) / 2) * font_px * 1.25
            parts.append(
                f'<text x="{_f(n.cx)}" y="{_f(ly)}" text-anchor="middle" dominant-baseline="middle" '
                f'font-family="sans-serif" font-size="{_f(font_px)}" fill="{STROKE}">{_svg_escape(line)}</text>'
            )

    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# PNG (Pillow)
# ---------------------------------------------------------------------------


def _dashed_line(draw: ImageDraw.ImageDraw, p1, p2, fill, width_px: int, dash=6.0, gap=4.0):
    x1, y1 = p1
    x2, y2 = p2
    total = ((x2 - x1) ** 2 + (y2 - y1) ** 2) ** 0.5
    if total == 0:
        return
    ux, uy = (x2 - x1) / total, (y2 - y1) / total
    pos = 0.0
    while pos < total:
        seg_end = min(pos + dash, total)
        draw.line(
            [(x1 + ux * pos, y1 + uy * pos), (x1 + ux * seg_end, y1 + uy * seg_end)],
            fill=fill,
            width=width_px,
        )
        pos = seg_end + gap


def png_bytes(layout: Layout, width: int, height: int, font_px: float) -> bytes:
    img = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default(size=max(6, round(font_px)))
    edge_font = ImageFont.load_default(size=max(5, round(font_px * EDGE_FONT_RATIO)))

    for e in layout.edges:
        color = ACCENT if e.accent else STROKE
        for p1, p2 in zip(e.points, e.points[1:]):
            if e.dashed:
                _dashed_line(draw, p1, p2, color, 2)
            else:
                draw.line([p1, p2], fill=color, width=2)
        if e.directed:
            draw.polygon(_arrow_head(e.points), fill=color)
        if e.label:
            draw.text(_edge_label_pos(e), e.label, fill=color, font=edge_font, anchor="lm")

    for n in layout.nodes:
        if n.shape == "ellipse":
            draw.ellipse([n.x, n.y, n.x + n.w, n.y + n.h], outline=STROKE, fill="white", width=2)
        else:
            polygon = _shape_polygon(n)
            if polygon is None:
                draw.rectangle([n.x, n.y, n.x + n.w, n.y + n.h], outline=STROKE, fill="white", width=2)
            else:
                draw.polygon(polygon, outline=STROKE, fill="white", width=2)
        n_lines = len(n.label_lines)
        for i, line in enumerate(n.label_lines):
            ly = n.cy + (i - (n_lines - 1) / 2) * font_px * 1.25
            draw.text((n.cx, ly), line, fill=STROKE, font=font, anchor="mm")

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
