"""Convergence plot: average test accuracy per round, one curve per strategy.

Output is plain SVG text plus a CSV sidecar holding exactly the plotted
points, so figures can be diffed without a renderer.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

from fraug.metrics import read_metrics

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf", "#bcbd22")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=60, right=160, top=30, bottom=50)


def convergence_series(rows) -> dict[str, list[tuple[int, float]]]:
    """``strategy -> [(round, mean accuracy over clients and seeds)]``."""
    acc = defaultdict(list)
    for r in rows:
        if r.split == "test" and r.metric == "accuracy":
            acc[(r.strategy, r.round)].append(r.value)
    series = defaultdict(list)
    for (strategy, rnd), vals in sorted(acc.items()):
        series[strategy].append((rnd, sum(vals) / len(vals)))
    return dict(series)


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < 1e-9:
        return lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_svg(series: dict[str, list[tuple[int, float]]], title: str = "Average test accuracy") -> str:
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = (min(xs), max(xs)) if max(xs) > min(xs) else (min(xs) - 1, max(xs) + 1)
    y0, y1 = _nice_range(min(ys), max(ys))
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="11">{yv:.1f}</text>')
        out.append(f'<text x="{sx(xv):.1f}" y="{HEIGHT - MARGIN["bottom"] + 16}" text-anchor="middle" font-size="11">{xv:g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">round</text>')
    out.append(
        f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">accuracy (%)</text>'
    )
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"><title>{escape(name)}</title></polyline>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(metrics_path, out_path) -> tuple[Path, Path]:
    """Write ``out_path`` (SVG) and ``out_path`` with a ``.csv`` suffix.

    Parsing happens before anything is written, so bad input leaves no files.
    """
    series = convergence_series(read_metrics(metrics_path))
    if not series:
        raise ValueError(f"{metrics_path}: no test accuracy rows to plot")
    out_path = Path(out_path)
    sidecar = out_path.with_suffix(".csv")
    svg = render_svg(series)
    lines = ["strategy,round,accuracy"]
    lines += [f"{name},{rnd},{acc!r}" for name, pts in series.items() for rnd, acc in pts]
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg, encoding="utf-8")
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path, sidecar
