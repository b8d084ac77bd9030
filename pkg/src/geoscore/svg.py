"""Minimal standalone SVG 1.1 scatter and line plots."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 480
MARGIN = dict(left=70, right=150, top=40, bottom=60)
PALETTE = ("#1f4e9a", "#c0392b", "#2e8b57", "#8e44ad", "#d35400", "#16a085", "#7f8c8d")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _range(values: np.ndarray):
    lo, hi = float(np.min(values)), float(np.max(values))
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError("plot data must be finite")
    if hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi)):
        pad = 0.5 if lo == 0 else 0.05 * abs(lo)
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Frame:
    def __init__(self, xs: np.ndarray, ys: np.ndarray, equal: bool = False):
        self.x0, self.x1 = _range(xs)
        self.y0, self.y1 = _range(ys)
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        if equal:
            # same units per pixel on both axes
            sx = (self.x1 - self.x0) / self.pw
            sy = (self.y1 - self.y0) / self.ph
            s = max(sx, sy)
            cx, cy = (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2
            self.x0, self.x1 = cx - s * self.pw / 2, cx + s * self.pw / 2
            self.y0, self.y1 = cy - s * self.ph / 2, cy + s * self.ph / 2

    def px(self, x):
        return MARGIN["left"] + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * self.pw

    def py(self, y):
        return MARGIN["top"] + self.ph - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * self.ph

    def axes(self, xlabel: str, ylabel: str, title: str) -> list:
        l, t = MARGIN["left"], MARGIN["top"]
        out = [f'<rect x="{l}" y="{t}" width="{self.pw}" height="{self.ph}" '
               'fill="none" stroke="#333" stroke-width="1"/>']
        for frac in np.linspace(0, 1, 5):
            xv = self.x0 + frac * (self.x1 - self.x0)
            yv = self.y0 + frac * (self.y1 - self.y0)
            xp, yp = self.px(xv), self.py(yv)
            out.append(f'<text x="{_fmt(xp)}" y="{t + self.ph + 18}" font-size="11" '
                       f'text-anchor="middle">{xv:.3g}</text>')
            out.append(f'<text x="{l - 6}" y="{_fmt(yp + 4)}" font-size="11" '
                       f'text-anchor="end">{yv:.3g}</text>')
        out.append(f'<text x="{l + self.pw / 2}" y="{HEIGHT - 15}" font-size="13" '
                   f'text-anchor="middle">{escape(xlabel)}</text>')
        out.append(f'<text x="18" y="{t + self.ph / 2}" font-size="13" text-anchor="middle" '
                   f'transform="rotate(-90 18 {t + self.ph / 2})">{escape(ylabel)}</text>')
        if title:
            out.append(f'<text x="{l + self.pw / 2}" y="24" font-size="14" '
                       f'text-anchor="middle">{escape(title)}</text>')
        return out


def _legend(entries: list) -> list:
    x = WIDTH - MARGIN["right"] + 12
    out = []
    for i, (label, color, mark) in enumerate(entries):
        y = MARGIN["top"] + 12 + 18 * i
        out.append(_mark(mark, x + 6, y - 4, color))
        out.append(f'<text x="{x + 16}" y="{y}" font-size="12">{escape(label)}</text>')
    return out


def _mark(kind: str, x: float, y: float, color: str, size: float = 3.0) -> str:
    if kind == "triangle":
        s = size * 1.6
        pts = f"{_fmt(x)},{_fmt(y - s)} {_fmt(x - s)},{_fmt(y + s)} {_fmt(x + s)},{_fmt(y + s)}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    if kind == "line":
        return (f'<line x1="{_fmt(x - 6)}" y1="{_fmt(y)}" x2="{_fmt(x + 6)}" y2="{_fmt(y)}" '
                f'stroke="{color}" stroke-width="2"/>')
    return f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{size}" fill="{color}"/>'


def _document(body: list) -> str:
    head = ('<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">\n'
            '<rect width="100%" height="100%" fill="white"/>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def emit_svg_scatter(series: Sequence[dict], path: Union[str, Path], xlabel: str = "x",
                     ylabel: str = "y", title: str = "", equal_aspect: bool = True) -> Path:
    """Scatter plot.  Each series is ``{"points": (n, 2), "label", "marker", "color"}``.

    ``marker`` is ``"dot"`` or ``"triangle"``.
    """
    series = [s for s in series if len(np.atleast_2d(s["points"])) and np.size(s["points"])]
    if not series:
        raise ValueError("scatter plot needs at least one nonempty series")
    allpts = np.concatenate([np.atleast_2d(s["points"])[:, :2] for s in series])
    frame = _Frame(allpts[:, 0], allpts[:, 1], equal=equal_aspect)
    body = frame.axes(xlabel, ylabel, title)
    legend = []
    for i, s in enumerate(series):
        color = s.get("color", PALETTE[i % len(PALETTE)])
        mark = s.get("marker", "dot")
        pts = np.atleast_2d(s["points"])
        body.append(f'<g class="series" id="series-{i}">')
        for px, py in zip(frame.px(pts[:, 0]), frame.py(pts[:, 1])):
            body.append(_mark(mark, px, py, color))
        body.append("</g>")
        legend.append((s.get("label", f"series {i}"), color, mark))
    body += _legend(legend)
    path = Path(path)
    path.write_text(_document(body))
    return path


def emit_svg_lines(series: Sequence[dict], path: Union[str, Path], xlabel: str = "x",
                   ylabel: str = "y", title: str = "") -> Path:
    """Line plot with one polyline per series ``{"x", "y", "label", "color"}``."""
    series = [s for s in series if len(s["x"])]
    if not series:
        raise ValueError("line plot needs at least one nonempty series")
    xs = np.concatenate([np.asarray(s["x"], dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s["y"], dtype=float) for s in series])
    frame = _Frame(xs, ys)
    body = frame.axes(xlabel, ylabel, title)
    legend = []
    for i, s in enumerate(series):
        color = s.get("color", PALETTE[i % len(PALETTE)])
        x, y = np.asarray(s["x"], dtype=float), np.asarray(s["y"], dtype=float)
        order = np.argsort(x, kind="stable")
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(frame.px(x[order]), frame.py(y[order])))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for a, b in zip(frame.px(x), frame.py(y)):
            body.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{color}"/>')
        legend.append((s.get("label", f"series {i}"), color, "line"))
    body += _legend(legend)
    path = Path(path)
    path.write_text(_document(body))
    return path
