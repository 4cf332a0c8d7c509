"""Dependency-free SVG overlays of a query and its counterfactual."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .data import as_array, atomic_write_text
from .engine import mask_to_rle

WIDTH = 960
PANEL_H = 110
GAP = 18
LEFT = 48
RIGHT = 12
TOP = 28
STRIP_H = 6


def _points(y, x0, dx, ymap) -> str:
    return " ".join(f"{x0 + i * dx:.2f},{ymap(v):.2f}" for i, v in enumerate(y))


def render_overlay(query, cf, mask=None, path=None, attribution=None, title: str = "",
                   channel_names=None) -> str:
    """One panel per channel: query (grey), counterfactual (red), shaded mask runs.

    ``attribution`` (T, C), when given, is drawn as a heat strip under each panel.
    Output is deterministic for fixed inputs; written atomically if ``path``.
    """
    q, c = as_array(query), as_array(cf)
    if q.shape != c.shape:
        raise ValueError(f"query {q.shape} and counterfactual {c.shape} differ")
    T, C = q.shape
    mask = np.zeros((T, C), bool) if mask is None else np.asarray(mask, dtype=bool)
    names = channel_names or [f"ch{i}" for i in range(C)]
    strip = STRIP_H + 4 if attribution is not None else 0
    height = TOP + C * (PANEL_H + strip + GAP)
    plot_w = WIDTH - LEFT - RIGHT
    dx = plot_w / max(T - 1, 1)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'viewBox="0 0 {WIDTH} {height}">',
        f'<rect width="{WIDTH}" height="{height}" fill="white"/>',
        f'<text x="{LEFT}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>',
    ]
    runs = mask_to_rle(mask)
    amax = float(np.abs(attribution).max()) if attribution is not None else 0.0
    for ch in range(C):
        y0 = TOP + ch * (PANEL_H + strip + GAP)
        lo = float(min(q[:, ch].min(), c[:, ch].min()))
        hi = float(max(q[:, ch].max(), c[:, ch].max()))
        span = hi - lo if hi > lo else 1.0

        def ymap(v, y0=y0, lo=lo, span=span):
            return y0 + PANEL_H - 4 - (v - lo) / span * (PANEL_H - 8)

        out.append(f'<g class="panel" id="panel-{ch}">')
        out.append(f'<rect x="{LEFT}" y="{y0}" width="{plot_w}" height="{PANEL_H}" '
                   f'fill="none" stroke="#cccccc"/>')
        for s, n in runs[ch]:
            x = LEFT + s * dx - dx / 2
            w = n * dx
            x, w = max(x, LEFT), min(w, LEFT + plot_w - max(x, LEFT))
            out.append(f'<rect class="modified" x="{x:.2f}" y="{y0}" width="{w:.2f}" '
                       f'height="{PANEL_H}" fill="#f28e8e" fill-opacity="0.3"/>')
        out.append(f'<text x="4" y="{y0 + PANEL_H / 2:.0f}" font-family="sans-serif" '
                   f'font-size="11">{escape(str(names[ch]))}</text>')
        out.append(f'<polyline class="query" fill="none" stroke="#555555" stroke-width="1" '
                   f'points="{_points(q[:, ch], LEFT, dx, ymap)}"/>')
        out.append(f'<polyline class="counterfactual" fill="none" stroke="#d62728" '
                   f'stroke-width="1" points="{_points(c[:, ch], LEFT, dx, ymap)}"/>')
        if attribution is not None and amax > 0:
            a = np.abs(np.asarray(attribution)[:, ch]) / amax
            ys = y0 + PANEL_H + 3
            for t in np.flatnonzero(a > 0.05):
                out.append(f'<rect class="attr" x="{LEFT + t * dx - dx / 2:.2f}" y="{ys}" '
                           f'width="{dx:.2f}" height="{STRIP_H}" fill="#1f77b4" '
                           f'fill-opacity="{a[t]:.3f}"/>')
        out.append("</g>")
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        atomic_write_text(path, text)
    return text
