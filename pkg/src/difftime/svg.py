"""Minimal line plots written straight to SVG."""
from __future__ import annotations

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def line_plot(path, x, series: dict, title: str = "", xlabel: str = "T", ylabel: str = "",
              width: int = 640, height: int = 400) -> None:
    """Polylines over a shared x-axis with ticks at the data range ends and midpoint.

    Non-finite points are dropped from their series.
    """
    x = np.asarray(x, dtype=np.float64)
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    ys = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()]) if series else np.zeros(1)
    ys = ys[np.isfinite(ys)]
    y0, y1 = (ys.min(), ys.max()) if ys.size else (0.0, 1.0)
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    x0, x1 = (x.min(), x.max()) if x.size else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (y1 - v) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
        f'<text x="15" y="{top + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2})">{ylabel}</text>',
    ]
    for v in (x0, 0.5 * (x0 + x1), x1):
        out.append(f'<text x="{px(v):.1f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(v)}</text>')
    for v in (y0, 0.5 * (y0 + y1), y1):
        out.append(f'<text x="{left - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    for i, (name, ys_) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        ys_ = np.asarray(ys_, dtype=np.float64)
        ok = np.isfinite(ys_)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], ys_[ok]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        for a, b in zip(x[ok], ys_[ok]):
            out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
