"""Degradation-curve emission: one CSV and one SVG per (task, corruption kind).

The SVG is written directly (polylines on a fixed canvas) so regenerating
from the same metrics produces byte-identical output.
"""

from __future__ import annotations

import csv
import os

from .trainer import PRIMARY_METRIC

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 160, 40, 50

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def series_from_metrics(rows, task: str, kind: str) -> dict:
    """variant -> sorted [(ratio, value)] from test-split rows of the task's
    primary metric."""
    metric = PRIMARY_METRIC[task]
    series: dict = {}
    for row in rows:
        if row.get("task") != task or row.get("split") != "test":
            continue
        if row.get("metric_name") != metric:
            continue
        setting = row.get("setting", {})
        if setting.get("kind") != kind:
            continue
        variant = row.get("variant", "model")
        series.setdefault(variant, {})[float(setting.get("ratio", 0))] = float(row["value"])
    return {
        variant: sorted(points.items()) for variant, points in sorted(series.items())
    }


def write_csv(series: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ratio", "variant", "value"])
        for variant in sorted(series):
            for ratio, value in series[variant]:
                writer.writerow([f"{ratio:g}", variant, f"{value:.6f}"])


def _scale(value, lo, hi, out_lo, out_hi):
    if hi == lo:
        return (out_lo + out_hi) / 2.0
    return out_lo + (value - lo) * (out_hi - out_lo) / (hi - lo)


def write_svg(series: dict, title: str, ylabel: str, path) -> None:
    xs = [r for points in series.values() for r, _ in points]
    ys = [v for points in series.values() for _, v in points]
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 100.0)
    y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 100.0)
    pad = max((y_hi - y_lo) * 0.08, 1e-6)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x):
        return _scale(x, x_lo, x_hi, MARGIN_L, WIDTH - MARGIN_R)

    def py(y):
        return _scale(y, y_lo, y_hi, HEIGHT - MARGIN_B, MARGIN_T)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
    ]
    # Axes
    x0, y0 = MARGIN_L, HEIGHT - MARGIN_B
    x1, y1 = WIDTH - MARGIN_R, MARGIN_T
    parts.append(
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black" stroke-width="1"/>'
    )
    for tick in sorted({x for x in xs} or {0.0, 100.0}):
        tx = px(tick)
        parts.append(
            f'<line x1="{tx:.2f}" y1="{y0}" x2="{tx:.2f}" y2="{y0 + 5}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{tx:.2f}" y="{y0 + 20}" text-anchor="middle" font-size="11" '
            f'font-family="sans-serif">{tick:g}</text>'
        )
    n_yticks = 5
    for i in range(n_yticks + 1):
        value = y_lo + (y_hi - y_lo) * i / n_yticks
        ty = py(value)
        parts.append(
            f'<line x1="{x0 - 5}" y1="{ty:.2f}" x2="{x0}" y2="{ty:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x0 - 9}" y="{ty + 4:.2f}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{value:.1f}</text>'
        )
    parts.append(
        f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">corruption ratio (%)</text>'
    )
    parts.append(
        f'<text x="18" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 18 {(y0 + y1) // 2})">{ylabel}</text>'
    )

    for idx, variant in enumerate(sorted(series)):
        color = PALETTE[idx % len(PALETTE)]
        points = series[variant]
        coords = " ".join(f"{px(r):.2f},{py(v):.2f}" for r, v in points)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for r, v in points:
            parts.append(
                f'<circle cx="{px(r):.2f}" cy="{py(v):.2f}" r="3" fill="{color}"/>'
            )
        ly = MARGIN_T + 18 * idx
        lx = WIDTH - MARGIN_R + 12
        parts.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 28}" y="{ly + 4}" font-size="11" font-family="sans-serif">'
            f"{variant}</text>"
        )
    parts.append("</svg>")

    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")


def emit_plots(rows, out_dir) -> list:
    """Write CSV + SVG per (task, kind) found in the metric rows; returns the
    list of written file paths."""
    os.makedirs(out_dir, exist_ok=True)
    combos = sorted(
        {
            (row["task"], row["setting"]["kind"])
            for row in rows
            if row.get("split") == "test" and row.get("task") in PRIMARY_METRIC
        }
    )
    if not combos:
        raise ValueError("no test metrics to plot")
    written = []
    for task, kind in combos:
        series = series_from_metrics(rows, task, kind)
        if not series:
            continue
        base = os.path.join(out_dir, f"{task}_{kind}")
        write_csv(series, base + ".csv")
        metric = PRIMARY_METRIC[task]
        write_svg(series, f"{task} under {kind}", metric, base + ".svg")
        written.extend([base + ".csv", base + ".svg"])
    return written
