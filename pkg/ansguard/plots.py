"""Minimal SVG line charts for report series."""

from collections.abc import Sequence
from html import escape
from pathlib import Path

from ansguard.errors import ConfigError

WIDTH, HEIGHT = 640, 400
MARGIN = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
TICKS = 5

Series = tuple[str, Sequence[tuple[float, float]]]


def _bounds(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def line_chart(series: Sequence[Series], title: str, x_label: str, y_label: str) -> str:
    """SVG document with one polyline and legend entry per named series."""
    points = [p for _, pts in series for p in pts]
    if not points:
        raise ConfigError("no points to plot")
    x_lo, x_hi = _bounds([float(x) for x, _ in points])
    y_lo, y_hi = _bounds([float(y) for _, y in points])
    plot_w, plot_h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def sx(x: float) -> float:
        return MARGIN + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * plot_h

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'  <rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'  <text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'  <line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'  <line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
    ]
    for i in range(TICKS + 1):
        x = x_lo + (x_hi - x_lo) * i / TICKS
        y = y_lo + (y_hi - y_lo) * i / TICKS
        lines.append(
            f'  <text x="{sx(x):.1f}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle">{x:.3g}</text>'
        )
        lines.append(f'  <text x="{MARGIN - 6}" y="{sy(y) + 4:.1f}" text-anchor="end">{y:.3g}</text>')
    lines.append(
        f'  <text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>'
    )
    lines.append(
        f'  <text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(y_label)}</text>'
    )
    for i, (name, pts) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(float(x)):.1f},{sy(float(y)):.1f}" for x, y in pts)
        lines.append(f'  <polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = MARGIN + 16 * i
        lines.append(
            f'  <line x1="{WIDTH - MARGIN - 110}" y1="{ly}" x2="{WIDTH - MARGIN - 90}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        lines.append(f'  <text x="{WIDTH - MARGIN - 84}" y="{ly + 4}">{escape(name)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_line_chart(path, series: Sequence[Series], title: str, x_label: str, y_label: str) -> Path:
    path = Path(path)
    path.write_text(line_chart(series, title, x_label, y_label))
    return path
