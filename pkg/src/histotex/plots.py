"""Minimal SVG polyline plots; the CSVs beside them are the source of truth."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f")

_W, _H = 640, 480
_ML, _MR, _MT, _MB = 70, 20, 40, 50


def _transform(value: float, lo: float, hi: float, log: bool) -> float:
    if log:
        value, lo, hi = math.log10(value), math.log10(lo), math.log10(hi)
    if hi == lo:
        return 0.5
    return (value - lo) / (hi - lo)


def line_plot_svg(path: str | Path,
                  series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
                  title: str = "", xlabel: str = "", ylabel: str = "",
                  log_x: bool = False) -> None:
    """Write a fixed-size line plot; series are (label, xs, ys) triples."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if math.isfinite(y)]
    if not xs_all or not ys_all:
        raise ValueError("nothing to plot")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5

    def px(x: float) -> float:
        return _ML + _transform(x, x_lo, x_hi, log_x) * (_W - _ML - _MR)

    def py(y: float) -> float:
        return _H - _MB - _transform(y, y_lo, y_hi, False) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" '
        'stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
        f'<text x="{_W / 2:.0f}" y="24" text-anchor="middle" font-size="16">'
        f'{title}</text>',
        f'<text x="{_W / 2:.0f}" y="{_H - 12}" text-anchor="middle" '
        f'font-size="13">{xlabel}</text>',
        f'<text x="18" y="{_H / 2:.0f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {_H / 2:.0f})">{ylabel}</text>',
        f'<text x="{_ML}" y="{_H - _MB + 16}" font-size="11">{x_lo:.4g}</text>',
        f'<text x="{_W - _MR}" y="{_H - _MB + 16}" text-anchor="end" '
        f'font-size="11">{x_hi:.4g}</text>',
        f'<text x="{_ML - 6}" y="{_H - _MB}" text-anchor="end" font-size="11">'
        f'{y_lo:.4g}</text>',
        f'<text x="{_ML - 6}" y="{_MT + 6}" text-anchor="end" font-size="11">'
        f'{y_hi:.4g}</text>',
    ]
    for i, (label, xs, ys) in enumerate(series):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys)
                       if math.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                     f'points="{pts}"/>')
        parts.append(f'<text x="{_W - _MR - 6}" y="{_MT + 16 + 16 * i}" '
                     f'text-anchor="end" font-size="12" fill="{colour}">'
                     f'{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
