"""
Deterministic SVG rendering of FROC and ROC curves

Output bytes depend only on the series passed in: fixed canvas, fixed
palette, fixed number formatting and no timestamps or random ids.
"""

import html
import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .classify_eval import AucEstimate
from .detect_eval import CPM_FP_RATES, FrocBootstrap, FrocCurve, interpolate_sensitivity
from .exceptions import InputValidationError

logger = logging.getLogger(__name__)

WIDTH = 640
HEIGHT = 480
MARGIN_LEFT = 70
MARGIN_RIGHT = 20
MARGIN_TOP = 40
MARGIN_BOTTOM = 60

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

FROC_X_MIN = 0.125
FROC_X_MAX = 8.0
FROC_SAMPLES = 121
FROC_TICK_LABELS = ("1/8", "1/4", "1/2", "1", "2", "4", "8")

VALID_KINDS = ("froc", "roc")


@dataclass
class CurveSeries:
    """One polyline with its legend label and optional CI band

    band holds (x, low, high) triples drawn as a shaded polygon.
    """
    label: str
    points: List[Tuple[float, float]]
    band: List[Tuple[float, float, float]] = field(default_factory=list)


class SvgCanvas:
    """Minimal SVG text builder"""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts: List[str] = []

    def line(self, x1, y1, x2, y2, stroke="#000000", width=1.0, dash: Optional[str] = None):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{stroke}" stroke-width="{width:.1f}"{extra}/>')

    def polyline(self, points: Sequence[Tuple[float, float]], stroke: str, width=2.0):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
            f'stroke-width="{width:.1f}"/>')

    def polygon(self, points: Sequence[Tuple[float, float]], fill: str, opacity=0.2):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.parts.append(
            f'<polygon points="{coords}" fill="{fill}" fill-opacity="{opacity:.2f}" stroke="none"/>')

    def rect(self, x, y, w, h, fill="#ffffff", stroke="none"):
        self.parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
            f'fill="{fill}" stroke="{stroke}"/>')

    def text(self, x, y, content: str, anchor="middle", size=12, rotate: Optional[float] = None):
        transform = f' transform="rotate({rotate:.0f} {x:.2f} {y:.2f})"' if rotate is not None else ""
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}"{transform}>{html.escape(content)}</text>')

    def render(self) -> str:
        header = (f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
                  f'width="{self.width}" height="{self.height}" '
                  f'viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([header, *self.parts, "</svg>"]) + "\n"


class _Axes:
    """Data-to-pixel mapping of the plot area"""

    def __init__(self, x_range: Tuple[float, float], log_x: bool):
        self.log_x = log_x
        self.x_lo, self.x_hi = (math.log2(x_range[0]), math.log2(x_range[1])) if log_x else x_range
        self.left = MARGIN_LEFT
        self.right = WIDTH - MARGIN_RIGHT
        self.top = MARGIN_TOP
        self.bottom = HEIGHT - MARGIN_BOTTOM

    def px(self, x: float) -> float:
        value = math.log2(x) if self.log_x else x
        return self.left + (value - self.x_lo) / (self.x_hi - self.x_lo) * (self.right - self.left)

    def py(self, y: float) -> float:
        return self.bottom - y * (self.bottom - self.top)


def _draw_frame(canvas: SvgCanvas, axes: _Axes, kind: str, title: Optional[str]):
    canvas.rect(0, 0, WIDTH, HEIGHT)
    canvas.rect(axes.left, axes.top, axes.right - axes.left, axes.bottom - axes.top,
                fill="none", stroke="#000000")

    for i in range(6):
        y = i / 5
        canvas.line(axes.left, axes.py(y), axes.right, axes.py(y), stroke="#dddddd", width=0.5)
        canvas.text(axes.left - 8, axes.py(y) + 4, f"{y:.1f}", anchor="end", size=11)

    if kind == "froc":
        ticks = list(zip(CPM_FP_RATES, FROC_TICK_LABELS))
        x_label, y_label = "Average false positives per scan", "Sensitivity"
    else:
        ticks = [(i / 5, f"{i / 5:.1f}") for i in range(6)]
        x_label, y_label = "False positive rate", "True positive rate"
        canvas.line(axes.px(0.0), axes.py(0.0), axes.px(1.0), axes.py(1.0),
                    stroke="#999999", width=1.0, dash="4,4")

    for x, label in ticks:
        canvas.line(axes.px(x), axes.top, axes.px(x), axes.bottom, stroke="#dddddd", width=0.5)
        canvas.text(axes.px(x), axes.bottom + 18, label, size=11)

    canvas.text((axes.left + axes.right) / 2, HEIGHT - 18, x_label, size=13)
    canvas.text(20, (axes.top + axes.bottom) / 2, y_label, size=13, rotate=-90)
    if title:
        canvas.text(WIDTH / 2, 24, title, size=14)


def _draw_legend(canvas: SvgCanvas, axes: _Axes, series: Sequence[CurveSeries]):
    x = axes.right - 250
    y = axes.bottom - 16 - 18 * (len(series) - 1)
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        canvas.line(x, y + 18 * i - 4, x + 24, y + 18 * i - 4, stroke=color, width=2.0)
        canvas.text(x + 30, y + 18 * i, s.label, anchor="start", size=12)


def render_curves(series: Sequence[CurveSeries], kind: str, title: Optional[str] = None) -> str:
    """Standalone SVG with one polyline per series

    FROC plots use a log2 x axis over [1/8, 8] FP per scan; ROC plots use
    linear [0, 1] axes with the chance diagonal.

    Args:
        series: Curves to overlay; each needs at least one point
        kind: "froc" or "roc"
        title: Optional heading

    Returns:
        SVG document text
    """
    if kind not in VALID_KINDS:
        raise InputValidationError(f"Unknown curve kind '{kind}' (expected froc or roc)")
    if not series or any(not s.points for s in series):
        raise InputValidationError("Cannot render an empty curve")

    axes = _Axes((FROC_X_MIN, FROC_X_MAX), True) if kind == "froc" else _Axes((0.0, 1.0), False)
    canvas = SvgCanvas(WIDTH, HEIGHT)
    _draw_frame(canvas, axes, kind, title)

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s.band:
            upper = [(axes.px(x), axes.py(hi)) for x, _, hi in s.band]
            lower = [(axes.px(x), axes.py(lo)) for x, lo, _ in reversed(s.band)]
            canvas.polygon(upper + lower, color)
        canvas.polyline([(axes.px(x), axes.py(y)) for x, y in s.points], color)

    _draw_legend(canvas, axes, series)
    return canvas.render()


def froc_series(curve: FrocCurve, name: str = "",
                bootstrap: Optional[FrocBootstrap] = None) -> CurveSeries:
    """Interpolated FROC over [1/8, 8] labelled with its CPM"""
    step = (math.log2(FROC_X_MAX) - math.log2(FROC_X_MIN)) / (FROC_SAMPLES - 1)
    xs = [2.0 ** (math.log2(FROC_X_MIN) + i * step) for i in range(FROC_SAMPLES)]
    points = [(x, interpolate_sensitivity(curve.points, x)) for x in xs]

    label = f"CPM = {curve.cpm:.3f}"
    band = []
    if bootstrap is not None:
        band = [(rate, lo, hi) for rate, (lo, hi) in zip(curve.fp_rates, bootstrap.rate_ci)]
        lo, hi = bootstrap.cpm_ci
        label += f" ({bootstrap.level:.0%} CI {lo:.3f}-{hi:.3f})"
    if name:
        label = f"{name}: {label}"
    return CurveSeries(label, points, band)


def roc_series(points: Sequence[Tuple[float, float]], est: AucEstimate,
               name: str = "") -> CurveSeries:
    """ROC polyline labelled with AUC and CI"""
    label = (f"AUC = {est.auc:.3f} ({est.level:.0%} CI {est.ci_low:.3f}-{est.ci_high:.3f})")
    if name:
        label = f"{name}: {label}"
    return CurveSeries(label, list(points))


__all__ = [
    'CurveSeries',
    'SvgCanvas',
    'render_curves',
    'froc_series',
    'roc_series'
]
