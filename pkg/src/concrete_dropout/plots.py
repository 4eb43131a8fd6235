"""Minimal SVG line plots of experiment trends; no plotting library needed."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

COLOURS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")
W, H, PAD = 480, 320, 48


def _scale(lo, hi, a, b):
    span = hi - lo or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def line_plot_svg(path, series: dict, xlabel: str, ylabel: str, logx: bool = False) -> None:
    """Write ``series`` ({name: (xs, ys)}) as polylines with a legend."""
    tx = (lambda v: math.log10(v)) if logx else float
    xs = [tx(x) for xv, _ in series.values() for x in xv]
    ys = [float(y) for _, yv in series.values() for y in yv]
    if not xs:
        return
    sx = _scale(min(xs), max(xs), PAD, W - PAD)
    sy = _scale(min(0.0, min(ys)), max(ys), H - PAD, PAD)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}{" (log)" if logx else ""}</text>',
        f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" text-anchor="middle">{escape(ylabel)}</text>',
        f'<text x="{PAD - 4}" y="{PAD}" text-anchor="end" font-size="10">{max(ys):.3g}</text>',
    ]
    for i, (name, (xv, yv)) in enumerate(series.items()):
        colour = COLOURS[i % len(COLOURS)]
        pts = " ".join(f"{sx(tx(x)):.1f},{sy(float(y)):.1f}" for x, y in zip(xv, yv))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{W - PAD}" y="{PAD + 14 * i}" text-anchor="end" fill="{colour}" font-size="11">{escape(name)}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
