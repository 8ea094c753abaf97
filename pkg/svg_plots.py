"""Minimal SVG charts written as f-strings.

Output is deterministic unless ``timestamp=True`` adds a generation comment.
"""
from datetime import datetime
from html import escape
from typing import Dict, Sequence, Tuple

import numpy as np
import pandas as pd

PALETTE = ("#1f77b4", "#dc3545", "#28a745", "#fd7e14", "#6f42c1", "#17a2b8", "#ffc107")


def _header(width: int, height: int, title: str, timestamp: bool) -> str:
    stamp = f"<!-- generated {datetime.now().isoformat(timespec='seconds')} -->\n" if timestamp else ""
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n{stamp}'
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>\n'
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>\n'
    )


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _bounds(values: np.ndarray, pad: float = 0.0) -> Tuple[float, float]:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return 0.0, 1.0
    lo, hi = float(finite.min()), float(finite.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


def line_chart(series: Dict[str, Tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "", ylabel: str = "", width: int = 640, height: int = 420,
               timestamp: bool = False) -> str:
    """Polyline per series with point markers, axes and a legend."""
    left, right, top, bottom = 60, 130, 36, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    xs_all = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()] or [np.zeros(0)])
    ys_all = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()] or [np.zeros(0)])
    x0, x1 = _bounds(xs_all, 0.05)
    y0, y1 = _bounds(ys_all, 0.05)

    def sx(v):
        return left + (v - x0) / (x1 - x0) * plot_w

    def sy(v):
        return top + plot_h - (v - y0) / (y1 - y0) * plot_h

    parts = [_header(width, height, title, timestamp)]
    parts.append(
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="#333"/>\n'
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="#333"/>\n'
    )
    for tick in np.linspace(x0, x1, 5):
        parts.append(f'<text x="{sx(tick):.1f}" y="{top + plot_h + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{_fmt(tick)}</text>\n')
    for tick in np.linspace(y0, y1, 5):
        parts.append(f'<text x="{left - 6}" y="{sy(tick) + 3:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{_fmt(tick)}</text>\n')
    parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>\n')
    parts.append(f'<text x="14" y="{top + plot_h / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12" transform="rotate(-90 14 {top + plot_h / 2:.1f})">{escape(ylabel)}</text>\n')

    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = [(sx(float(x)), sy(float(y))) for x, y in zip(xs, ys) if np.isfinite(x) and np.isfinite(y)]
        if pts:
            path = " ".join(f"{px:.2f},{py:.2f}" for px, py in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>\n')
            for px, py in pts:
                parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color}"/>\n')
        ly = top + 14 * i + 8
        parts.append(f'<rect x="{left + plot_w + 12}" y="{ly - 8}" width="10" height="10" fill="{color}"/>\n'
                     f'<text x="{left + plot_w + 28}" y="{ly + 1}" font-family="sans-serif" '
                     f'font-size="11">{escape(str(name))}</text>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def arrow_field_svg(arrows: pd.DataFrame, title: str = "", size: int = 480, timestamp: bool = False) -> str:
    """Arrows (x0, y0) -> (x1, y1) in unit-square coordinates."""
    margin = 30
    span = size - 2 * margin

    def sx(v):
        return margin + v * span

    def sy(v):
        return margin + (1.0 - v) * span

    parts = [_header(size, size, title, timestamp)]
    parts.append(
        '<defs><marker id="head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto">'
        '<path d="M0,0 L6,3 L0,6 z" fill="#1f77b4"/></marker></defs>\n'
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="#999"/>\n'
    )
    for row in arrows.itertuples(index=False):
        parts.append(f'<line x1="{sx(row.x0):.2f}" y1="{sy(row.y0):.2f}" x2="{sx(row.x1):.2f}" '
                     f'y2="{sy(row.y1):.2f}" stroke="#1f77b4" stroke-width="1" marker-end="url(#head)"/>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def heatmap_svg(values: np.ndarray, title: str = "", cell: int = 12, timestamp: bool = False) -> str:
    """Grey-scale heatmap of a 2D array, row 0 at the bottom."""
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    lo, hi = _bounds(values.ravel())
    width, height = nx * cell + 20, ny * cell + 40
    parts = [_header(width, height, title, timestamp)]
    for iy in range(ny):
        for ix in range(nx):
            v = values[iy, ix]
            shade = 255 if not np.isfinite(v) else int(round(255 * (1 - (v - lo) / (hi - lo))))
            parts.append(f'<rect x="{10 + ix * cell}" y="{30 + (ny - 1 - iy) * cell}" width="{cell}" '
                         f'height="{cell}" fill="rgb({shade},{shade},{shade})"/>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def empty_chart(title: str = "", timestamp: bool = False) -> str:
    return _header(320, 80, title, timestamp) + (
        '<text x="160" y="55" text-anchor="middle" font-family="sans-serif" font-size="12">no data</text>\n'
        "</svg>\n"
    )
