"""Dependency-free SVG heatmaps on a fixed [-1, 1] diverging color scale."""

from __future__ import annotations

import itertools
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

CELL = 28
MARGIN = 48
VMIN, VMAX = -1.0, 1.0


def color(value: float) -> str:
    """Blue at -1, white at 0, red at +1; values outside the range are clipped."""
    if not np.isfinite(value):
        return "#808080"
    t = min(max(float(value), VMIN), VMAX)
    if t >= 0:
        r, g, b = 255, round(255 * (1 - t)), round(255 * (1 - t))
    else:
        r, g, b = round(255 * (1 + t)), round(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def render(values: np.ndarray, levels: Sequence[Sequence[int]], title: str = "",
           axis_names: Sequence[str] | None = None) -> str:
    """Heatmap with one rect per grid cell.

    Axis 0 runs down the rows and axis 1 across the columns. Any further axes
    are laid out as side-by-side panels, so the number of cells always equals
    the product of the level counts.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
        levels = [levels[0], [0]]
    if list(values.shape) != [len(lv) for lv in levels]:
        raise ValueError("values shape does not match the level lists")
    names = list(axis_names or [f"k_{a + 1}" for a in range(values.ndim)])
    rows, cols = values.shape[:2]
    panels = list(itertools.product(*(range(len(lv)) for lv in levels[2:])))
    panel_w = cols * CELL + MARGIN
    width = MARGIN + panel_w * len(panels)
    height = 2 * MARGIN + rows * CELL
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="9">',
        f'<title>{escape(title)}</title>',
        f'<text x="{MARGIN}" y="14" font-size="12">{escape(title)}</text>',
    ]
    for p_idx, rest in enumerate(panels):
        x0 = MARGIN + p_idx * panel_w
        y0 = MARGIN
        if rest:
            label = ", ".join(f"{names[2 + a]}={levels[2 + a][i]}" for a, i in enumerate(rest))
            out.append(f'<text x="{x0}" y="{y0 - 18}">{escape(label)}</text>')
        for j in range(cols):
            out.append(f'<text x="{x0 + j * CELL + CELL / 2}" y="{y0 - 4}" text-anchor="middle">'
                       f'{levels[1][j]}</text>')
        for i in range(rows):
            out.append(f'<text x="{x0 - 4}" y="{y0 + i * CELL + CELL / 2 + 3}" text-anchor="end">'
                       f'{levels[0][i]}</text>')
            for j in range(cols):
                v = float(values[(i, j, *rest)])
                out.append(
                    f'<rect class="cell" x="{x0 + j * CELL}" y="{y0 + i * CELL}" width="{CELL}" '
                    f'height="{CELL}" fill="{color(v)}" data-value="{v:.6g}"/>')
    out.append(f'<text x="{MARGIN}" y="{height - 16}">rows: {escape(names[0])}; '
               f'columns: {escape(names[1] if len(names) > 1 else "")}; scale [-1, 1]</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
