"""CSV and SVG emission for run reports."""

from __future__ import annotations

import csv
import io
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

from .metrics import Curve

log = logging.getLogger(__name__)

RECORD_HEADER = ("experiment", "arm", "seed", "epoch", "alpha", "loss_src", "loss_tar", "train_acc", "test_acc")
METRIC_HEADER = ("experiment", "arm", "seed", "metric", "level", "value")
AGGREGATE_HEADER = ("experiment", "arm", "metric", "level", "median", "n")


def fmt(value) -> str:
    """Fixed 9-significant-digit rendering; integers and strings pass through."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        out = f"{value:.9g}"
        return "0" if out == "-0" else out
    return str(value)


def _write(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def write_records_csv(path, rows) -> None:
    _write(path, RECORD_HEADER, rows)


def write_metrics_csv(path, rows) -> None:
    _write(path, METRIC_HEADER, rows)


def write_aggregate_csv(path, rows) -> None:
    _write(path, AGGREGATE_HEADER, rows)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --- SVG ---------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


class PlotArea:
    """Affine map from data coordinates to the SVG plot rectangle."""

    def __init__(self, x_range, y_range, left=60.0, top=20.0, width=480.0, height=300.0):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.left, self.top, self.width, self.height = left, top, width, height

    def map(self, x: float, y: float) -> tuple[float, float]:
        px = self.left + (x - self.x0) / (self.x1 - self.x0) * self.width
        py = self.top + self.height - (y - self.y0) / (self.y1 - self.y0) * self.height
        return px, py


def emit_svg_lineplot(curves: Sequence[Curve], path, x_label: str = "epoch", y_label: str = "value", title: str = "") -> list[str]:
    """Write one polyline per non-empty curve; returns warnings for skipped curves.

    Axes are linear and span the data extents exactly, so the largest x and y
    land on the right and top edges of the plot area.
    """
    warnings = []
    usable = []
    for c in curves:
        pts = [(x, y) for x, y in c.points() if not (math.isnan(y) or math.isinf(y))]
        if not pts:
            msg = f"curve {c.name!r} is empty; skipped"
            log.warning(msg)
            warnings.append(msg)
            continue
        usable.append((c.name, pts))
    if not curves:
        raise ValueError("emit_svg_lineplot needs at least one curve")
    xs = [x for _, pts in usable for x, _ in pts] or [0.0, 1.0]
    ys = [y for _, pts in usable for _, y in pts] or [0.0, 1.0]
    area = PlotArea((min(xs), max(xs)), (min(ys), max(ys)))
    W = area.left + area.width + 160
    H = area.top + area.height + 50
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:g}" height="{H:g}" viewBox="0 0 {W:g} {H:g}">',
        f'<rect x="0" y="0" width="{W:g}" height="{H:g}" fill="white"/>',
        f'<g id="plot-area" data-left="{area.left:g}" data-top="{area.top:g}" '
        f'data-width="{area.width:g}" data-height="{area.height:g}">',
        f'<rect x="{area.left:g}" y="{area.top:g}" width="{area.width:g}" height="{area.height:g}" '
        'fill="none" stroke="#444"/>',
        "</g>",
    ]
    for i in range(5):
        fy = area.y0 + (area.y1 - area.y0) * i / 4
        fx = area.x0 + (area.x1 - area.x0) * i / 4
        _, py = area.map(area.x0, fy)
        px, _ = area.map(fx, area.y0)
        out.append(f'<text x="{area.left - 6:g}" y="{py + 4:.2f}" font-size="10" text-anchor="end">{fy:.3g}</text>')
        out.append(
            f'<text x="{px:.2f}" y="{area.top + area.height + 14:g}" font-size="10" text-anchor="middle">{fx:.3g}</text>'
        )
    out.append(
        f'<text x="{area.left + area.width / 2:g}" y="{H - 8:g}" font-size="12" text-anchor="middle">{escape(x_label)}</text>'
    )
    out.append(
        f'<text x="14" y="{area.top + area.height / 2:g}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {area.top + area.height / 2:g})">{escape(y_label)}</text>'
    )
    if title:
        out.append(f'<text x="{area.left:g}" y="14" font-size="12">{escape(title)}</text>')
    for i, (name, pts) in enumerate(usable):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join("{:.3f},{:.3f}".format(*area.map(x, y)) for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" data-name="{escape(name)}" points="{coords}"/>')
        ly = area.top + 14 + 16 * i
        lx = area.left + area.width + 12
        out.append(f'<line x1="{lx:g}" y1="{ly - 4:g}" x2="{lx + 18:g}" y2="{ly - 4:g}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{lx + 24:g}" y="{ly:g}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
    return warnings
