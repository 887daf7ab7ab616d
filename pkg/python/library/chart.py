# /*****************************************************************************
# * | File        :   chart.py
# * | Function    :   Line and histogram charts from result tables
# * | Info        :   A chart is laid out once as pixel-space shapes, then
# * |                 rendered either as SVG text or as a PNG through Pillow.
# ******************************************************************************

import io
import math
import logging
from dataclasses import dataclass
from xml.sax.saxutils import escape

from PIL import Image, ImageDraw, ImageFont
from PIL.PngImagePlugin import PngInfo

from library.config import CHART_WIDTH, CHART_HEIGHT, CHART_MARGIN, CHART_COLORS
from library.errors import InputError
from library.manifest import atomic_write

logger = logging.getLogger(__name__)

BACKGROUND = "#ffffff"
AXIS_COLOR = "#333333"
GRID_COLOR = "#dddddd"
TICKS = 5


@dataclass(frozen=True)
class Shape:
    kind: str           # line, polyline, rect or text
    points: tuple
    color: str = AXIS_COLOR
    width: int = 1
    text: str = ""
    anchor: str = "start"


def nice_number(value):
    """Shortest decimal rendering for tick labels."""
    if value == 0:
        return "0"
    text = f"{value:.4g}"
    return text.replace("e-0", "e-").replace("e+0", "e")


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _series(tab):
    x_name = tab.metadata.get("x", tab.columns[0])
    if "series" in tab.metadata:
        names = [n.strip() for n in tab.metadata["series"].split(",") if n.strip()]
    else:
        names = [c for c in tab.columns if c != x_name
                 and all(_is_number(v) for v in tab.column(c))]
    if not names:
        raise InputError("table has no numeric series to plot")
    xs = tab.column(x_name)
    return x_name, xs, [(name, [float(v) for v in tab.column(name)]) for name in names]


def _range(values, include_zero=False):
    finite = [v for v in values if math.isfinite(v)]
    low, high = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if include_zero:
        low, high = min(low, 0.0), max(high, 0.0)
    if high == low:
        low, high = low - 0.5, high + 0.5
    return low, high


class Chart:
    """Pixel layout of one chart"""
    def __init__(self, title="", width=CHART_WIDTH, height=CHART_HEIGHT, margin=CHART_MARGIN, metadata=None):
        self.title = title
        # key=value pairs of the source table, digests included; written into every rendering
        self.metadata = dict(metadata or {})
        self.width = width
        self.height = height
        self.margin = margin
        self.shapes = []

    @property
    def plot_box(self):
        m = self.margin
        return m, m, self.width - m, self.height - m

    def _axes(self, x_range, y_range, x_label, x_ticks=None):
        left, top, right, bottom = self.plot_box
        y_low, y_high = y_range
        for k in range(TICKS + 1):
            value = y_low + (y_high - y_low) * k / TICKS
            y = bottom - (bottom - top) * k / TICKS
            self.shapes.append(Shape("line", ((left, y), (right, y)), GRID_COLOR))
            self.shapes.append(Shape("text", ((left - 4, y + 4),), text=nice_number(value), anchor="end"))
        if x_ticks is None:
            x_low, x_high = x_range
            x_ticks = [(x_low + (x_high - x_low) * k / TICKS, nice_number(x_low + (x_high - x_low) * k / TICKS))
                       for k in range(TICKS + 1)]
        for value, label in x_ticks:
            x = self._x(value, x_range)
            self.shapes.append(Shape("text", ((x, bottom + 14),), text=label, anchor="middle"))
        self.shapes.append(Shape("line", ((left, bottom), (right, bottom))))
        self.shapes.append(Shape("line", ((left, top), (left, bottom))))
        self.shapes.append(Shape("text", (((left + right) / 2, self.height - 8),), text=x_label,
                                 anchor="middle"))
        if self.title:
            self.shapes.append(Shape("text", ((self.width / 2, top - 16),), text=self.title, anchor="middle"))

    def _x(self, value, x_range):
        left, _, right, _ = self.plot_box
        low, high = x_range
        return left + (right - left) * (value - low) / (high - low)

    def _y(self, value, y_range):
        _, top, _, bottom = self.plot_box
        low, high = y_range
        return bottom - (bottom - top) * (value - low) / (high - low)

    def _legend(self, names):
        _, top, right, _ = self.plot_box
        for k, name in enumerate(names):
            color = CHART_COLORS[k % len(CHART_COLORS)]
            y = top + 4 + 14 * k
            self.shapes.append(Shape("rect", ((right - 120, y), (right - 110, y + 10)), color))
            self.shapes.append(Shape("text", ((right - 106, y + 9),), text=name))

    def line_chart(self, tab):
        x_name, xs, series = _series(tab)
        xs = [float(x) for x in xs]
        x_range = _range(xs)
        y_range = _range([v for _, values in series for v in values])
        self._axes(x_range, y_range, x_name)
        for k, (name, values) in enumerate(series):
            points = tuple((self._x(x, x_range), self._y(y, y_range))
                           for x, y in zip(xs, values) if math.isfinite(y))
            if not points:
                continue
            if len(points) == 1:
                (px, py), = points
                points = ((px - 2, py), (px + 2, py))
            self.shapes.append(Shape("polyline", points, CHART_COLORS[k % len(CHART_COLORS)], 2))
        self._legend([name for name, _ in series])
        return self

    def histogram(self, tab):
        """Grouped bars, one group per row, one bar per series."""
        x_name, xs, series = _series(tab)
        groups = len(xs)
        x_range = (0.0, float(groups))
        y_range = _range([v for _, values in series for v in values], include_zero=True)
        step = max(1, math.ceil(groups / 10))
        ticks = [(g + 0.5, nice_number(xs[g]) if _is_number(xs[g]) else str(xs[g]))
                 for g in range(0, groups, step)]
        self._axes(x_range, y_range, x_name, ticks)
        bar = 0.8 / len(series)
        for k, (_, values) in enumerate(series):
            color = CHART_COLORS[k % len(CHART_COLORS)]
            for g, value in enumerate(values):
                x0 = self._x(g + 0.1 + k * bar, x_range)
                x1 = self._x(g + 0.1 + (k + 1) * bar, x_range)
                y0, y1 = self._y(0.0, y_range), self._y(value, y_range)
                self.shapes.append(Shape("rect", ((x0, min(y0, y1)), (x1, max(y0, y1))), color))
        self._legend([name for name, _ in series])
        return self

    def to_svg(self):
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                 f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif" font-size="11">',
                 f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="{BACKGROUND}" />']
        if self.metadata:
            entries = "\n".join(escape(f"{key}={value}") for key, value in self.metadata.items())
            parts.append(f"<metadata>\n{entries}\n</metadata>")
        for s in self.shapes:
            if s.kind == "line":
                (x1, y1), (x2, y2) = s.points
                parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                             f'stroke="{s.color}" stroke-width="{s.width}" />')
            elif s.kind == "polyline":
                coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in s.points)
                parts.append(f'<polyline points="{coords}" fill="none" stroke="{s.color}" '
                             f'stroke-width="{s.width}" />')
            elif s.kind == "rect":
                (x1, y1), (x2, y2) = s.points
                parts.append(f'<rect x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" '
                             f'height="{y2 - y1:.2f}" fill="{s.color}" />')
            else:
                (x, y), = s.points
                parts.append(f'<text x="{x:.2f}" y="{y:.2f}" text-anchor="{s.anchor}" '
                             f'fill="{s.color}">{escape(s.text)}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def to_image(self):
        image = Image.new("RGB", (self.width, self.height), BACKGROUND)
        draw = ImageDraw.Draw(image)
        font = ImageFont.load_default()
        for s in self.shapes:
            if s.kind in ("line", "polyline"):
                draw.line([tuple(p) for p in s.points], fill=s.color, width=s.width)
            elif s.kind == "rect":
                (x1, y1), (x2, y2) = s.points
                draw.rectangle((x1, y1, x2, y2), fill=s.color)
            else:
                (x, y), = s.points
                left, top, right, bottom = draw.textbbox((0, 0), s.text, font=font)
                offset = {"start": 0, "middle": (right - left) / 2, "end": right - left}[s.anchor]
                draw.text((x - offset, y - (bottom - top)), s.text, fill=s.color, font=font)
        return image


def build_chart(tab, kind=None, title=None):
    """Lay out a table as the chart its `chart` metadata hints at (line by default)."""
    kind = kind or tab.metadata.get("chart", "line")
    chart = Chart(title if title is not None else tab.metadata.get("title", ""), metadata=tab.metadata)
    if kind == "histogram":
        return chart.histogram(tab)
    if kind == "line":
        return chart.line_chart(tab)
    raise InputError(f"unknown chart kind {kind!r}")


def save_chart(chart, path):
    """SVG unless the path ends in .png. Table metadata goes into <metadata> or PNG text chunks."""
    path = str(path)
    if path.lower().endswith(".png"):
        image = chart.to_image()
        buffer = io.BytesIO()
        info = PngInfo()
        for key, value in chart.metadata.items():
            info.add_text(key, str(value))
        image.save(buffer, format="PNG", pnginfo=info)
        atomic_write(path, buffer.getvalue())
    else:
        atomic_write(path, chart.to_svg())
    logger.info("Chart written to %s", path)
    return path
