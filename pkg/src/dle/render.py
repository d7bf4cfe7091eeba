"""Plain-SVG rendering of replay frames and training curves."""

from __future__ import annotations

import math

import numpy as np

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _rect_points(x, y, h, length, width, to_px):
    c, s = math.cos(h), math.sin(h)
    pts = []
    for dl, dw in ((0.5, 0.5), (0.5, -0.5), (-0.5, -0.5), (-0.5, 0.5)):
        px = x + dl * length * c - dw * width * s
        py = y + dl * length * s + dw * width * c
        pts.append(to_px(px, py))
    return " ".join(f"{u:.2f},{v:.2f}" for u, v in pts)


def frame_svg(summary: dict, lanes, colliding=(), title: str = "",
              window_m=(-40.0, 120.0), scale: float = 5.0) -> str:
    """Bird's-eye view centred on the ego.

    Args:
        summary: one ``state_summary`` record.
        lanes: list of ``(points, width)`` lane polylines in world frame.
        colliding: agent ids drawn in red with a thick outline.
    """
    agents = summary["agents"]
    ego = next(a for a in agents if a[0] == 0)
    ex, ey = ego[1], ego[2]
    x0, x1 = ex + window_m[0], ex + window_m[1]
    ys = [p[1] for pts, _ in lanes for p in pts]
    y0, y1 = min(ys) - 6.0, max(ys) + 6.0
    w_px = (x1 - x0) * scale
    h_px = (y1 - y0) * scale

    def to_px(x, y):
        return (x - x0) * scale, (y1 - y) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px:.0f}" height="{h_px + 20:.0f}">',
           f'<rect width="100%" height="100%" fill="#f4f4f4"/>']
    for pts, width in lanes:
        pts = np.asarray(pts)
        path = " ".join(f"{u:.2f},{v:.2f}" for u, v in (to_px(*p) for p in pts))
        out.append(f'<polyline points="{path}" fill="none" stroke="#bbbbbb" '
                   f'stroke-width="{width * scale:.1f}" stroke-linecap="butt"/>')
        out.append(f'<polyline points="{path}" fill="none" stroke="#ffffff" stroke-width="1" '
                   f'stroke-dasharray="6,6"/>')
    for aid, x, y, h, speed, _lane, length, width in agents:
        if aid == 0:
            fill = "#2ca02c"
        elif aid in colliding:
            fill = "#d62728"
        else:
            fill = "#1f77b4"
        stroke = ' class="collision" stroke="#000000" stroke-width="2"' if aid in colliding else ""
        out.append(f'<polygon points="{_rect_points(x, y, h, length, width, to_px)}" fill="{fill}"{stroke}/>')
    out.append(f'<text x="4" y="{h_px + 15:.0f}" font-size="12" font-family="monospace">'
               f'{title} t={summary["time_s"]:.1f}s v={summary["ego_speed_mps"]:.2f}m/s</text>')
    out.append("</svg>")
    return "\n".join(out)


def curves_svg(series: dict, width: int = 640, height: int = 360, smooth: int = 20,
               ylabel: str = "episode reward") -> str:
    """Line chart of ``{label: [values]}`` with a trailing moving average."""
    pad = 40
    smoothed = {}
    for label, ys in series.items():
        ys = np.asarray(ys, dtype=np.float64)
        if len(ys) == 0:
            continue
        k = max(1, min(smooth, len(ys)))
        c = np.cumsum(np.insert(ys, 0, 0.0))
        avg = np.array([(c[i + 1] - c[max(0, i + 1 - k)]) / (i + 1 - max(0, i + 1 - k))
                        for i in range(len(ys))])
        smoothed[label] = avg
    if not smoothed:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    n_max = max(len(v) for v in smoothed.values())
    lo = min(float(v.min()) for v in smoothed.values())
    hi = max(float(v.max()) for v in smoothed.values())
    if hi - lo < 1e-9:
        hi = lo + 1.0

    def px(i, y):
        return (pad + (width - 2 * pad) * i / max(1, n_max - 1),
                height - pad - (height - 2 * pad) * (y - lo) / (hi - lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           '<rect width="100%" height="100%" fill="#ffffff"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="#000"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="#000"/>',
           f'<text x="{pad}" y="{pad - 8}" font-size="11" font-family="sans-serif">{ylabel}</text>',
           f'<text x="{width - pad}" y="{height - 10}" font-size="11" text-anchor="end" '
           f'font-family="sans-serif">episode</text>',
           f'<text x="4" y="{height - pad}" font-size="10" font-family="sans-serif">{lo:.2f}</text>',
           f'<text x="4" y="{pad + 4}" font-size="10" font-family="sans-serif">{hi:.2f}</text>']
    for k, (label, ys) in enumerate(sorted(smoothed.items())):
        colour = _COLOURS[k % len(_COLOURS)]
        pts = " ".join(f"{u:.1f},{v:.1f}" for u, v in (px(i, y) for i, y in enumerate(ys)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * k}" font-size="11" fill="{colour}" '
                   f'font-family="sans-serif">{label}</text>')
    out.append("</svg>")
    return "\n".join(out)
