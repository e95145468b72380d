"""Minimal SVG writers for curves and heat maps (no plotting dependency)."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 360, 48


def _frame(title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="black"/>',
    ]


def line_plot(path, series, title="", xlabel="", ylabel="", xlim=None, ylim=None):
    """``series`` maps a label to ``(x, y)`` arrays."""
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    x0, x1 = xlim or (float(xs.min()), float(xs.max()))
    y0, y1 = ylim or (float(ys.min()), float(ys.max()))
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x, y):
        return (PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD), H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD))

    out = _frame(title, xlabel, ylabel)
    out.append(f'<text x="{PAD}" y="{H - PAD + 14}">{x0:g}</text>')
    out.append(f'<text x="{W - PAD}" y="{H - PAD + 14}" text-anchor="end">{x1:g}</text>')
    out.append(f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end">{y0:g}</text>')
    out.append(f'<text x="{PAD - 4}" y="{PAD + 10}" text-anchor="end">{y1:g}</text>')
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    for c, (label, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in (px(u, v) for u, v in zip(x, y)))
        color = colors[c % len(colors)]
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - PAD - 4}" y="{PAD + 16 + 14 * c}" text-anchor="end" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def heatmap(path, matrix, title="", xlabel="", ylabel=""):
    """Grey-scale image of ``matrix`` (rows top to bottom), dark = low."""
    M = np.asarray(matrix, dtype=float)
    lo, hi = float(np.nanmin(M)), float(np.nanmax(M))
    span = hi - lo if hi > lo else 1.0
    rows, cols = M.shape
    cw, ch = (W - 2 * PAD) / cols, (H - 2 * PAD) / rows
    out = _frame(title, xlabel, ylabel)
    for i in range(rows):
        for j in range(cols):
            g = int(round(255 * (M[i, j] - lo) / span))
            out.append(
                f'<rect x="{PAD + j * cw:.2f}" y="{PAD + i * ch:.2f}" width="{cw + 0.05:.2f}" '
                f'height="{ch + 0.05:.2f}" fill="rgb({g},{g},{g})"/>'
            )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
