"""CSV outputs with provenance headers, and self-drawn SVG line plots."""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

HEADER_PREFIX = "# "


def write_csv(path, columns, rows, config: dict, seed: int, command: str, notes: dict | None = None) -> Path:
    """Write ``rows`` under comment lines holding the command, seed and resolved config.

    The file is written to a temporary name and renamed, so a failed run never
    leaves a half-written table behind.
    """
    path = Path(path)
    buf = io.StringIO()
    buf.write(f"{HEADER_PREFIX}command: {command}\n")
    buf.write(f"{HEADER_PREFIX}seed: {seed}\n")
    buf.write(f"{HEADER_PREFIX}config: {json.dumps(config, sort_keys=True)}\n")
    for key, value in (notes or {}).items():
        buf.write(f"{HEADER_PREFIX}{key}: {json.dumps(value, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())
    return path


def _fmt(v):
    # numpy scalars would otherwise print as e.g. "np.float64(0.5)"
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def read_csv(path) -> tuple[dict, list[dict]]:
    """Return (header fields, rows as dicts). Header values are JSON-decoded when possible."""
    header, body = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith(HEADER_PREFIX.strip()):
                key, _, value = line[len(HEADER_PREFIX):].rstrip("\n").partition(": ")
                try:
                    header[key] = json.loads(value)
                except json.JSONDecodeError:
                    header[key] = value
            else:
                body.append(line)
    rows = list(csv.DictReader(body))
    return header, rows


# ---------------------------------------------------------------------------
# svg

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot_svg(series: dict[str, tuple[list[float], list[float]]], title: str, xlabel: str,
                  ylabel: str, width: int = 480, height: int = 320, ylim=None) -> str:
    """Standalone SVG with axes, tick labels, one polyline per series and a legend."""
    left, right, top, bottom = 60, 120, 30, 45
    xs = [x for sx, _ in series.values() for x in sx]
    ys = [y for _, sy in series.values() for y in sy]
    if not xs:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = ylim if ylim is not None else (min(ys), max(ys))
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.1f}" y1="{top + ph}" x2="{sx(t):.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 16}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" y1="{sy(t):.1f}" x2="{left}" y2="{sy(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 7}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, (px, py)) in enumerate(series.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(px, py))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg: str) -> Path:
    path = Path(path)
    _atomic_write(path, svg)
    return path
