"""CSV tables and SVG bar charts for evaluation reports.

Human-facing tables round to one decimal place; a JSON sidecar keeps the
full-precision values. All output is deterministic: no timestamps, no
dict-order dependence, fixed number formatting.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .evaluation import EvalReport

_PALETTE = ("#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860")


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.1f}"


def emit_csv(reports, path) -> Path:
    """Write reports as CSV plus a full-precision JSON sidecar.

    Columns: model,regime,clean,uap,class. One row per class, then a
    summary row with class=ALL per report. Returns the sidecar path.
    """
    reports = [reports] if isinstance(reports, EvalReport) else list(reports)
    if not reports:
        raise ConfigError("emit_csv needs at least one report")
    path = Path(path)
    lines = ["model,regime,clean,uap,class"]
    for r in reports:
        for c, (clean_c, uap_c) in enumerate(zip(r.per_class_clean, r.per_class_uap)):
            lines.append(f"{r.model_id},{r.regime},{_fmt(clean_c)},{_fmt(uap_c)},{c}")
        lines.append(f"{r.model_id},{r.regime},{_fmt(r.clean_accuracy)},{_fmt(r.uap_accuracy)},ALL")
    path.write_text("\n".join(lines) + "\n")
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    return sidecar


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def emit_svg_bars(vectors, labels, path, title: str = "", y_label: str = "accuracy (%)") -> None:
    """Grouped per-class accuracy bars as a self-contained SVG.

    ``vectors`` is a sequence of equal-length per-class accuracy lists
    (None renders as a zero-height bar); ``labels`` names each series in
    the legend. Output bytes depend only on the inputs.
    """
    vectors = [list(v) for v in vectors]
    if not vectors or len(labels) != len(vectors):
        raise ConfigError("need one label per vector")
    n = len(vectors[0])
    if n < 2:
        raise ConfigError("need at least two classes to plot")
    if any(len(v) != n for v in vectors):
        raise ConfigError(f"vector lengths differ: {[len(v) for v in vectors]}")

    bar_w, gap, group_gap = 14, 2, 18
    group_w = len(vectors) * (bar_w + gap) + group_gap
    margin_left, margin_top, plot_h = 56, 42, 240
    width = margin_left + n * group_w + 150
    height = margin_top + plot_h + 48
    y0 = margin_top + plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{margin_left}" y="20" font-size="13">{title}</text>')
    for tick in range(0, 101, 20):
        y = y0 - plot_h * tick / 100.0
        parts.append(f'<line x1="{margin_left}" y1="{y:.2f}" x2="{width - 140}" y2="{y:.2f}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{margin_left - 8}" y="{y + 4:.2f}" text-anchor="end">{tick}</text>')
    parts.append(f'<text x="14" y="{margin_top + plot_h / 2:.2f}" '
                 f'transform="rotate(-90 14 {margin_top + plot_h / 2:.2f})" '
                 f'text-anchor="middle">{y_label}</text>')

    for c in range(n):
        gx = margin_left + c * group_w
        for s, vec in enumerate(vectors):
            v = 0.0 if vec[c] is None else max(0.0, min(100.0, float(vec[c])))
            bh = plot_h * v / 100.0
            x = gx + s * (bar_w + gap)
            parts.append(f'<rect class="bar" x="{x:.2f}" y="{y0 - bh:.2f}" width="{bar_w}" '
                         f'height="{bh:.2f}" fill="{_PALETTE[s % len(_PALETTE)]}"/>')
        cx = gx + (len(vectors) * (bar_w + gap)) / 2.0
        parts.append(f'<text x="{cx:.2f}" y="{y0 + 16}" text-anchor="middle">{c}</text>')
    parts.append(f'<line x1="{margin_left}" y1="{y0}" x2="{width - 140}" y2="{y0}" '
                 f'stroke="black" stroke-width="1"/>')

    lx = width - 130
    for s, label in enumerate(labels):
        ly = margin_top + s * 18
        parts.append(f'<rect x="{lx}" y="{ly}" width="12" height="12" '
                     f'fill="{_PALETTE[s % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{lx + 18}" y="{ly + 10}">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
