"""Self-contained SVG charts: reliability diagram, score distributions, IFIV bars.

Plain string assembly, no plotting library. Numbers are formatted with fixed
precision so the same data always produces the same bytes.
"""
from __future__ import annotations

from html import escape
from pathlib import Path

from .calibration import CalibrationReport
from .ifiv import IFIVReport

W, H = 360, 300
MARGIN = dict(left=48, right=16, top=28, bottom=40)


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Canvas:
    def __init__(self, title: str, width: int = W, height: int = H):
        self.width, self.height = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        ]

    @property
    def box(self):
        return (MARGIN["left"], MARGIN["top"], self.width - MARGIN["right"], self.height - MARGIN["bottom"])

    def rect(self, x, y, w, h, fill, opacity=1.0):
        self.parts.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(max(w, 0))}" height="{_f(max(h, 0))}" '
                          f'fill="{fill}" fill-opacity="{opacity:.2f}" stroke="#333" stroke-width="0.5"/>')

    def line(self, x1, y1, x2, y2, color="#333", dash=None, width=1.0):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" stroke="{color}" '
                          f'stroke-width="{width}"{extra}/>')

    def text(self, x, y, s, anchor="middle", size=11):
        self.parts.append(f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" font-size="{size}">'
                          f'{escape(str(s))}</text>')

    def axes(self, xlabel: str, ylabel: str):
        x0, y0, x1, y1 = self.box
        self.line(x0, y1, x1, y1)
        self.line(x0, y0, x0, y1)
        self.text((x0 + x1) / 2, self.height - 8, xlabel)
        self.parts.append(f'<text x="12" y="{_f((y0 + y1) / 2)}" text-anchor="middle" '
                          f'transform="rotate(-90 12 {_f((y0 + y1) / 2)})">{escape(ylabel)}</text>')

    def svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def reliability_svg(report: CalibrationReport, title: str = "Reliability diagram") -> str:
    """Bars of per-bin accuracy against confidence, with the diagonal and gap overlay."""
    c = _Canvas(f"{title} (T={report.temperature:.3f}, ECE={100 * report.ece_after:.2f}%)")
    c.axes("confidence", "accuracy")
    x0, y0, x1, y1 = c.box
    sx, sy = x1 - x0, y1 - y0
    for b in report.bins:
        bx, bw = x0 + b.lo * sx, (b.hi - b.lo) * sx
        if b.count:
            c.rect(bx, y1 - b.accuracy * sy, bw, b.accuracy * sy, "#4a78c2")
            top, bottom = sorted((b.accuracy, b.avg_conf))
            c.rect(bx, y1 - bottom * sy, bw, (bottom - top) * sy, "#e06666", 0.45)
    c.line(x0, y1, x1, y0, "#888", dash="4 3")
    for k in range(0, 11, 2):
        c.text(x0 + k / 10 * sx, y1 + 14, f"{k / 10:.1f}")
        c.text(x0 - 6, y1 - k / 10 * sy + 4, f"{k / 10:.1f}", anchor="end")
    return c.svg()


def score_hist_svg(report: CalibrationReport, title: str = "Score distribution") -> str:
    """Side-by-side counts of positive and negative outfits per score bin."""
    c = _Canvas(title)
    c.axes("score", "outfits")
    x0, y0, x1, y1 = c.box
    top = max([max(p, n) for _, _, p, n in report.score_hist] + [1])
    sx, sy = (x1 - x0) / 100.0, (y1 - y0) / top
    for lo, hi, pos, neg in report.score_hist:
        w = (hi - lo) * sx / 2
        c.rect(x0 + lo * sx, y1 - pos * sy, w, pos * sy, "#6aa84f")
        c.rect(x0 + lo * sx + w, y1 - neg * sy, w, neg * sy, "#cc4125")
    for k in range(0, 101, 20):
        c.text(x0 + k * sx, y1 + 14, str(k))
    c.text(x0 - 6, y0 + 4, str(top), anchor="end")
    c.text(x1 - 4, y0 + 12, "pos", anchor="end")
    c.rect(x1 - 34, y0 + 4, 8, 8, "#6aa84f")
    c.text(x1 - 4, y0 + 26, "neg", anchor="end")
    c.rect(x1 - 34, y0 + 18, 8, 8, "#cc4125")
    return c.svg()


def ifiv_bars_svg(report: IFIVReport, title: str | None = None) -> str:
    """One horizontal bar per (part, feature), in ranking order; the predicted flaw is highlighted."""
    rows = report.ranking
    height = MARGIN["top"] + MARGIN["bottom"] + 18 * max(len(rows), 1)
    c = _Canvas(title or f"IFIV (target={report.target}, score={report.score:.2f})", width=420, height=height)
    x0, y0, x1, y1 = 150, MARGIN["top"], 420 - MARGIN["right"], height - MARGIN["bottom"]
    span = max([abs(v) for _, _, v in rows] + [1e-12])
    mid = (x0 + x1) / 2
    half = (x1 - x0) / 2
    c.line(mid, y0, mid, y1, "#888")
    for k, (part, feat, v) in enumerate(rows):
        y = y0 + 18 * k
        w = abs(v) / span * half
        fill = "#cc4125" if k == 0 else ("#e69138" if v < 0 else "#6aa84f")
        c.rect(mid - w if v < 0 else mid, y + 3, w, 12, fill)
        c.text(x0 - 6, y + 13, f"{part}/{feat}", anchor="end")
    c.text(mid, y1 + 16, f"IFIV, range +/-{span:.3g}")
    return c.svg()


def write_svg(text: str, path) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
