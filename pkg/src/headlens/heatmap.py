"""Heatmap export for head-importance matrices (SVG, or 16-bit PGM)."""
from __future__ import annotations

import numpy as np

CELL = 24
MARGIN = 40


def darkness(scores: np.ndarray) -> np.ndarray:
    """Map scores to [0, 1]: min -> 0 (lightest), max -> 1 (darkest)."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = float(np.nanmin(s)), float(np.nanmax(s))
    if hi == lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def to_svg(scores: np.ndarray, title: str = "", color: str = "#08306b") -> str:
    s = np.asarray(scores, dtype=np.float64)
    n_rows, n_cols = s.shape
    d = darkness(s)
    width = MARGIN + n_cols * CELL + 10
    height = MARGIN + n_rows * CELL + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<title>{title}</title>',
           f'<rect width="{width}" height="{height}" fill="#ffffff"/>']
    for h in range(n_cols):
        out.append(f'<text x="{MARGIN + h * CELL + CELL / 2}" y="{MARGIN - 6}" font-size="9" '
                   f'text-anchor="middle">{h}</text>')
    for l in range(n_rows):
        y = MARGIN + l * CELL
        out.append(f'<text x="{MARGIN - 6}" y="{y + CELL / 2 + 3}" font-size="9" text-anchor="end">{l}</text>')
        for h in range(n_cols):
            x = MARGIN + h * CELL
            out.append(f'<rect class="cell" data-layer="{l}" data-head="{h}" data-score="{float(s[l, h])!r}" '
                       f'x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{color}" '
                       f'fill-opacity="{float(d[l, h])!r}"/>')
    lo, hi = float(np.nanmin(s)), float(np.nanmax(s))
    y = MARGIN + n_rows * CELL + 20
    out.append(f'<text class="legend" x="{MARGIN}" y="{y}" font-size="10">min {lo:.6g}  max {hi:.6g}  '
               f'(darker = higher)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def to_pgm(scores: np.ndarray, cell: int = 8) -> bytes:
    """Binary 16-bit graymap: white for the minimum, black for the maximum."""
    d = darkness(scores)
    levels = np.round((1.0 - d) * 65535).astype(">u2")
    img = np.kron(levels, np.ones((cell, cell), dtype=">u2"))
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    return header + img.astype(">u2").tobytes()


def cell_opacities(svg: str) -> np.ndarray:
    """Read the per-cell opacities back out of an SVG written by to_svg."""
    import re
    cells = re.findall(r'data-layer="(\d+)" data-head="(\d+)".*?fill-opacity="([^"]+)"', svg)
    n_rows = max(int(c[0]) for c in cells) + 1
    n_cols = max(int(c[1]) for c in cells) + 1
    out = np.zeros((n_rows, n_cols))
    for l, h, o in cells:
        out[int(l), int(h)] = float(o)
    return out
