"""Minimal self-contained SVG line and scatter charts (800 x 500 viewBox)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from html import escape
from pathlib import Path
from typing import Optional, Sequence

WIDTH, HEIGHT = 800, 500
MARGIN = dict(left=80, right=170, top=50, bottom=60)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    """Ticks on a 1-2-5 step covering [lo, hi]."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("non-finite axis range")
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        lo, hi = lo - pad, hi + pad
    raw = (hi - lo) / max(target - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t / step) * step)
        t += step
    if ticks[-1] < hi:
        ticks.append(ticks[-1] + step)
    return ticks


def _fmt(x: float) -> str:
    return f"{x:.4g}"


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    mode: str = "line"  # "line" | "points" | "both"


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    series: list = field(default_factory=list)
    xticklabels: Optional[dict] = None  # tick value -> text, for categorical axes

    def add(self, label, x, y, mode="line") -> "Chart":
        self.series.append(Series(label, list(map(float, x)), list(map(float, y)), mode))
        return self

    def render(self) -> str:
        xs = [v for s in self.series for v in s.x]
        ys = [v for s in self.series for v in s.y if math.isfinite(v)]
        if not xs or not ys:
            raise ValueError("chart has no data")
        xt = sorted(self.xticklabels) if self.xticklabels else nice_ticks(min(xs), max(xs))
        yt = nice_ticks(min(ys), max(ys))
        x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        left, top = MARGIN["left"], MARGIN["top"]
        pw = WIDTH - left - MARGIN["right"]
        ph = HEIGHT - top - MARGIN["bottom"]
        px = lambda x: left + (x - x0) / (x1 - x0) * pw  # noqa: E731
        py = lambda y: top + ph - (y - y0) / (y1 - y0) * ph  # noqa: E731

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
            f'font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.1f}" y="28" text-anchor="middle" font-size="16">{escape(self.title)}</text>',
        ]
        for t in yt:
            y = py(t)
            out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#e5e5e5"/>')
            out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
        for t in xt:
            x = px(t)
            text = self.xticklabels[t] if self.xticklabels else _fmt(t)
            out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{x:.1f}" y="{top + ph + 20}" text-anchor="middle">{escape(str(text))}</text>')
        out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
        out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text transform="translate(20,{top + ph / 2:.1f}) rotate(-90)" '
                   f'text-anchor="middle">{escape(self.ylabel)}</text>')

        for k, s in enumerate(self.series):
            color = PALETTE[k % len(PALETTE)]
            pts = [(px(a), py(b)) for a, b in zip(s.x, s.y) if math.isfinite(b)]
            if s.mode in ("line", "both") and len(pts) > 1:
                path = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
                out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            if s.mode in ("points", "both"):
                out.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3.5" fill="{color}"/>' for a, b in pts)
            ly = top + 10 + 20 * k
            lx = left + pw + 15
            out.append(f'<rect x="{lx}" y="{ly - 9}" width="12" height="12" fill="{color}"/>')
            out.append(f'<text x="{lx + 18}" y="{ly + 1}">{escape(s.label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render())
        return path
