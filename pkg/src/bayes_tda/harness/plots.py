"""Static SVG plots: p-value histograms, correlation heat grids, mean-p vs dataset size.

The SVG is written by hand so the output is deterministic and every plotted
number also appears as a text label.
"""
from __future__ import annotations

import logging
import math
import os
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

log = logging.getLogger(__name__)

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _doc(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _text(x, y, s, anchor="middle", size=None, cls=None) -> str:
    extra = f' font-size="{size}"' if size else ""
    extra += f' class="{cls}"' if cls else ""
    return f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}"{extra}>{escape(str(s))}</text>'


def _num(v: float) -> str:
    return "nan" if v is None or not math.isfinite(v) else f"{v:.3g}"


def histogram_svg(counts, title: str = "", low_noise_fraction: float | None = None) -> str:
    """Bars over [0, 1]; the tallest bin spans the full plot height."""
    counts = [int(c) for c in counts]
    bins = len(counts)
    W, H, left, right, top, bottom = 480, 300, 50, 20, 40, 40
    pw, ph = W - left - right, H - top - bottom
    peak = max(counts) if counts and max(counts) > 0 else 1
    bw = pw / max(bins, 1)
    body = [_text(W / 2, 20, title, size=13)]
    if low_noise_fraction is not None:
        body.append(_text(W - right, 20, f"p<0.05: {_num(low_noise_fraction)}", anchor="end", cls="low-noise"))
    for i, c in enumerate(counts):
        h = ph * c / peak
        x = left + i * bw
        body.append(f'<rect class="bar" x="{x:.1f}" y="{top + ph - h:.1f}" width="{bw:.1f}" height="{h:.1f}" '
                    f'fill="{PALETTE[0]}" stroke="white"/>')
        body.append(_text(x + bw / 2, top + ph - h - 3, c, size=9, cls="count"))
    body.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        body.append(_text(left + tick * pw, top + ph + 15, f"{tick:g}"))
    body.append(_text(left + pw / 2, H - 5, "p-value"))
    return _doc(W, H, body)


def _heat_color(v: float) -> str:
    """Blue (-1) through white (0) to red (+1); grey for undefined cells."""
    if v is None or not math.isfinite(v):
        return "#cccccc"
    v = max(-1.0, min(1.0, v))
    fade = int(round(255 * (1 - abs(v))))
    return f"#ff{fade:02x}{fade:02x}" if v >= 0 else f"#{fade:02x}{fade:02x}ff"


def heat_grid_svg(matrix, labels: list[str], title: str = "") -> str:
    matrix = np.asarray(matrix, dtype=np.float64)
    k = len(labels)
    cell, left, top = 56, 70, 50
    W, H = left + k * cell + 20, top + k * cell + 20
    body = [_text(W / 2, 20, title, size=13)]
    for i, name in enumerate(labels):
        body.append(_text(left - 6, top + i * cell + cell / 2 + 4, name, anchor="end"))
        body.append(_text(left + i * cell + cell / 2, top - 6, name))
    for i in range(k):
        for j in range(k):
            x, y = left + j * cell, top + i * cell
            body.append(f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="{_heat_color(matrix[i, j])}" stroke="white"/>')
            body.append(_text(x + cell / 2, y + cell / 2 + 4, _num(matrix[i, j]), cls="cell-label"))
    return _doc(W, H, body)


def line_chart_svg(xs, series: dict[str, list[float]], title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    xs = [float(x) for x in xs]
    W, H, left, right, top, bottom = 520, 320, 60, 120, 40, 45
    pw, ph = W - left - right, H - top - bottom
    finite = [v for ys in series.values() for v in ys if v is not None and math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1.0

    def px(x):
        return left + pw * (x - x0) / span

    def py(y):
        return top + ph * (1 - (y - lo) / (hi - lo))

    body = [_text(W / 2, 20, title, size=13),
            f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
            _text(left + pw / 2, H - 8, xlabel),
            _text(14, top + ph / 2, ylabel, cls="ylabel")]
    for x in xs:
        body.append(_text(px(x), top + ph + 15, f"{x:g}"))
    for v in (lo, hi):
        body.append(_text(left - 5, py(v) + 4, _num(v), anchor="end"))
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = [(px(x), py(y), y) for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
        if len(pts) > 1:
            path = " ".join(f"{a:.1f},{b:.1f}" for a, b, _ in pts)
            body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for a, b, y in pts:
            body.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{color}"/>')
            body.append(_text(a, b - 6, _num(y), size=9, cls="point-label"))
        body.append(_text(left + pw + 10, top + 15 * (k + 1), name, anchor="start"))
    return _doc(W, H, body)


def _write(path: Path, text: str) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def emit_plots(report, out_dir: str | Path) -> list[Path]:
    """Write ``hist_p_{method}.svg`` and ``corr_{stat}.svg`` for a report; returns the paths written."""
    from .experiment import STAT_FILE_TAGS

    out = Path(out_dir)
    if not report.pair_stats:
        log.warning("report has no methods; no plots written")
        return []
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for method, (counts, frac) in report.histograms.items():
        svg = histogram_svg(counts, f"{method} p-values", frac)
        written.append(_write(out / f"hist_p_{method}.svg", svg))
    for stat, corr in report.correlations.items():
        svg = heat_grid_svg(corr.pearson, corr.methods, f"Pearson correlation of per-pair {stat.value}")
        written.append(_write(out / f"corr_{STAT_FILE_TAGS[stat]}.svg", svg))
    if report.swa_ablation:
        t = list(range(1, len(report.swa_ablation) + 1))
        svg = line_chart_svg(t, {"LOO": report.swa_ablation}, "Mean LOO p-value vs SWA checkpoints",
                             "t_swa", "mean p")
        written.append(_write(out / "swa_ablation.svg", svg))
    return written


def size_sweep_svg(results: dict) -> str:
    """Mean p-value against training-set size, averaged over data seeds, one line per method."""
    series = {}
    for method, by_seed in results["mean_p"].items():
        rows = np.array(list(by_seed.values()), dtype=np.float64)
        series[method] = [float(v) for v in np.nanmean(rows, axis=0)]
    return line_chart_svg(results["sizes"], series, "Mean p-value vs training-set size", "N", "mean p")
