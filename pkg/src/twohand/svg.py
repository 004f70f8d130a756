"""Minimal SVG writers for attention heat grids and PCK curves."""
from __future__ import annotations

from html import escape

import numpy as np


def _doc(width, height, body, comment=None) -> str:
    head = f"<!-- {escape(comment)} -->\n" if comment else ""
    return (f'<?xml version="1.0" encoding="UTF-8"?>\n{head}'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n{body}</svg>\n')


def normalize(matrix) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant matrix maps to zeros."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    return np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)


def heat_grid(matrix, title: str = "", cell: float = 6.0, comment: str | None = None) -> str:
    """Grayscale heat grid, white = largest weight."""
    m = normalize(matrix)
    rows, cols = m.shape
    top = 20 if title else 0
    parts = []
    if title:
        parts.append(f'<text x="2" y="14" font-family="monospace" font-size="12">{escape(title)}</text>\n')
    for i in range(rows):
        for j in range(cols):
            g = int(round(255 * m[i, j]))
            parts.append(f'<rect x="{j * cell:g}" y="{top + i * cell:g}" width="{cell:g}" height="{cell:g}" '
                         f'fill="rgb({g},{g},{g})"/>\n')
    return _doc(max(cols * cell, 200), top + rows * cell, "".join(parts), comment)


def line_plot(x, y, title: str = "", xlabel: str = "", ylabel: str = "",
              y_range=(0.0, 1.0), comment: str | None = None, width=420, height=300) -> str:
    x, y = np.asarray(x, float), np.asarray(y, float)
    pad = 45
    x0, x1 = float(x.min()), float(x.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    y0, y1 = y_range
    px = pad + (x - x0) / (x1 - x0) * (width - 2 * pad)
    py = height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    body = [
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n',
        f'<polyline fill="none" stroke="black" stroke-width="1.5" points="{pts}"/>\n',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>\n',
        f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>\n',
        f'<text x="12" y="{height / 2:.0f}" font-size="11" transform="rotate(-90 12 {height / 2:.0f})" '
        f'text-anchor="middle">{escape(ylabel)}</text>\n',
        f'<text x="{pad - 4}" y="{height - pad + 4}" text-anchor="end" font-size="10">{y0:g}</text>\n',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="10">{y1:g}</text>\n',
        f'<text x="{pad}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x0:g}</text>\n',
        f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x1:g}</text>\n',
    ]
    return _doc(width, height, "".join(body), comment)
