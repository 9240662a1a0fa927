"""Self-contained SVG output for grids (heatmaps) and survival curves (log-y plots)."""

from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path

import numpy as np

# viridis anchor colours, interpolated linearly
_VIRIDIS = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=float)


def _colour(t: float) -> str:
    if not math.isfinite(t):
        return "#cccccc"
    t = min(max(t, 0.0), 1.0) * (len(_VIRIDIS) - 1)
    k = min(int(t), len(_VIRIDIS) - 2)
    c = _VIRIDIS[k] + (t - k) * (_VIRIDIS[k + 1] - _VIRIDIS[k])
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in c)


def write_grid_csv(path, centers: np.ndarray, values: np.ndarray) -> None:
    """Row-major ``x,y,value`` rows; NaN cells are written as ``nan``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(centers.reshape(-1, 2), values.ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(xs, ys, grid)`` with ``grid[row=y, col=x]``."""
    rows = _read_rows(path)
    if not rows or set(rows[0]) < {"x", "y", "value"}:
        raise ValueError(f"{path}: expected columns x,y,value")
    x = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    v = np.array([float(r["value"]) for r in rows])
    xs, ys = np.unique(x), np.unique(y)
    grid = np.full((ys.size, xs.size), np.nan)
    grid[np.searchsorted(ys, y), np.searchsorted(xs, x)] = v
    return xs, ys, grid


def _read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def heatmap_svg(grid: np.ndarray, title: str = "", size: int = 400) -> str:
    """Heatmap with ``grid[0]`` drawn at the bottom (y grows upwards)."""
    grid = np.asarray(grid, dtype=np.float64)
    ny, nx = grid.shape
    finite = grid[np.isfinite(grid)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 0.0)
    span = hi - lo
    cw, ch = size / nx, size / ny
    pad, legend = 30, 60
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad + legend}" '
             f'height="{size + 2 * pad}" viewBox="0 0 {size + 2 * pad + legend} {size + 2 * pad}">',
             f'<title>{_esc(title)}</title>',
             f'<text x="{pad}" y="{pad - 10}" font-size="12" font-family="sans-serif">{_esc(title)}</text>']
    for r in range(ny):
        yy = pad + (ny - 1 - r) * ch
        for c in range(nx):
            v = grid[r, c]
            t = 0.5 if span == 0 else (v - lo) / span
            parts.append(f'<rect class="cell" x="{pad + c * cw:.3f}" y="{yy:.3f}" width="{cw:.3f}" '
                         f'height="{ch:.3f}" fill="{_colour(t)}"/>')
    lx = pad + size + 15
    if span == 0:
        parts.append(f'<rect x="{lx}" y="{pad}" width="15" height="{size}" fill="{_colour(0.5)}"/>')
        parts.append(f'<text class="legend" x="{lx}" y="{pad + size + 15}" font-size="10" '
                     f'font-family="sans-serif">{lo:.4g}</text>')
    else:
        steps = 50
        for k in range(steps):
            parts.append(f'<rect x="{lx}" y="{pad + size * (1 - (k + 1) / steps):.3f}" width="15" '
                         f'height="{size / steps + 0.5:.3f}" fill="{_colour(k / (steps - 1))}"/>')
        parts.append(f'<text class="legend" x="{lx}" y="{pad - 2}" font-size="10" '
                     f'font-family="sans-serif">{hi:.4g}</text>')
        parts.append(f'<text class="legend" x="{lx}" y="{pad + size + 12}" font-size="10" '
                     f'font-family="sans-serif">{lo:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def logplot_svg(x: np.ndarray, series: dict[str, np.ndarray], title: str = "",
                width: int = 500, height: int = 350) -> str:
    """Line plot with a base-10 logarithmic y axis; non-positive values are skipped."""
    x = np.asarray(x, dtype=np.float64)
    pad = 50
    pos = np.concatenate([np.asarray(v, dtype=float)[np.asarray(v, dtype=float) > 0] for v in series.values()]
                         or [np.array([1.0])])
    if pos.size == 0:
        pos = np.array([1.0])
    ylo = math.floor(math.log10(pos.min()))
    yhi = math.ceil(math.log10(pos.max()))
    if yhi == ylo:
        yhi += 1
    xlo, xhi = float(x.min()), float(x.max())
    if xhi == xlo:
        xhi = xlo + 1.0

    def px(v):
        return pad + (v - xlo) / (xhi - xlo) * (width - 2 * pad)

    def py(v):
        return height - pad - (math.log10(v) - ylo) / (yhi - ylo) * (height - 2 * pad)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">', f'<title>{_esc(title)}</title>',
             f'<text x="{pad}" y="20" font-size="12" font-family="sans-serif">{_esc(title)}</text>',
             f'<g class="axis" data-yscale="log10">',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for e in range(ylo, yhi + 1):
        yy = py(10.0 ** e)
        parts.append(f'<line x1="{pad - 4}" y1="{yy:.2f}" x2="{pad}" y2="{yy:.2f}" stroke="black"/>')
        parts.append(f'<text class="ytick" x="{pad - 6}" y="{yy + 3:.2f}" font-size="10" text-anchor="end" '
                     f'font-family="sans-serif">1e{e}</text>')
    for t in np.linspace(xlo, xhi, 5):
        parts.append(f'<text class="xtick" x="{px(t):.2f}" y="{height - pad + 14}" font-size="10" '
                     f'text-anchor="middle" font-family="sans-serif">{t:.3g}</text>')
    parts.append("</g>")
    for k, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=float)
        pts = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, ys) if b > 0 and math.isfinite(b)]
        if pts:
            parts.append(f'<polyline fill="none" stroke="{palette[k % len(palette)]}" stroke-width="1.5" '
                         f'points="{" ".join(pts)}"><title>{_esc(name)}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _pool(grid: np.ndarray, max_cells: int) -> np.ndarray:
    """Block-average so neither side exceeds ``max_cells`` (keeps SVGs small)."""
    ny, nx = grid.shape
    f = max(1, math.ceil(max(ny, nx) / max_cells))
    if f == 1:
        return grid
    py, px = -(-ny // f) * f, -(-nx // f) * f
    padded = np.full((py, px), np.nan)
    padded[:ny, :nx] = grid
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(padded.reshape(py // f, f, px // f, f), axis=(1, 3))


def render_svg(csv_path, out_path, style: str = "auto", title: str | None = None,
               max_cells: int = 150) -> Path:
    """Render a grid CSV (``x,y,value``) as a heatmap or a curve CSV as a log-y plot."""
    csv_path, out_path = Path(csv_path), Path(out_path)
    rows = _read_rows(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    cols = list(rows[0].keys())
    if style == "auto":
        style = "grid" if {"x", "y", "value"} <= set(cols) else "curve"
    title = csv_path.stem if title is None else title
    if style == "grid":
        _, _, grid = read_grid_csv(csv_path)
        svg = heatmap_svg(_pool(grid, max_cells), title)
    elif style == "curve":
        x = np.array([float(r[cols[0]]) for r in rows])
        series = {c: np.array([float(r[c]) for r in rows]) for c in cols[1:]}
        svg = logplot_svg(x, series, title)
    else:
        raise ValueError(f"unknown style {style!r}")
    out_path.write_text(svg)
    return out_path
