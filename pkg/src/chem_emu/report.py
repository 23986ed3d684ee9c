"""Static SVG figures: trajectory panels, loss curves and error heatmaps.

Every figure uses a fixed 960x540 viewBox and plain polylines/rects, so
the output is self-contained and opens in any browser.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 960, 540
TRUTH_STYLE = 'stroke="black" stroke-dasharray="6,4" fill="none" stroke-width="1.5"'
PRED_STYLE = 'stroke="#c0392b" fill="none" stroke-width="1.5"'


def _doc(body: list[str], title: str) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif">'
    )
    return "\n".join(
        [
            '<?xml version="1.0" encoding="UTF-8"?>',
            head,
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="16">{escape(title)}</text>',
            *body,
            "</svg>",
        ]
    )


def _grid(n: int) -> tuple[int, int]:
    cols = math.ceil(math.sqrt(n * WIDTH / HEIGHT))
    return cols, math.ceil(n / cols)


def _scale(lo: float, hi: float, a: float, b: float):
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / (hi - lo) * (b - a)


def _polyline(xs, ys, style: str, cls: str) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y))
    return f'<polyline class="{cls}" points="{pts}" {style}/>'


def trajectory_svg(times, truth, pred, names: Sequence[str], title: str = "Trajectories") -> str:
    """One panel per species; truth dashed black, prediction solid."""
    truth, pred = np.asarray(truth, dtype=float), np.asarray(pred, dtype=float)
    n = truth.shape[1]
    cols, rows = _grid(n)
    pw, ph = (WIDTH - 20) / cols, (HEIGHT - 60) / rows
    body = []
    for s in range(n):
        x0, y0 = 10 + (s % cols) * pw, 40 + (s // cols) * ph
        both = np.concatenate([truth[:, s], pred[:, s]])
        both = both[np.isfinite(both)]
        lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
        sx = _scale(float(np.min(times)), float(np.max(times)), x0 + 40, x0 + pw - 10)
        sy = _scale(lo, hi, y0 + ph - 20, y0 + 18)
        body.append(f'<g class="panel" data-species="{escape(str(names[s]))}">')
        body.append(f'<rect x="{x0 + 40:.1f}" y="{y0 + 18:.1f}" width="{pw - 50:.1f}" height="{ph - 38:.1f}" fill="none" stroke="#999"/>')
        body.append(f'<text x="{x0 + pw / 2:.1f}" y="{y0 + 14:.1f}" text-anchor="middle" font-size="12">{escape(str(names[s]))}</text>')
        body.append(f'<text x="{x0 + 36:.1f}" y="{y0 + 24:.1f}" text-anchor="end" font-size="9">{hi:.3g}</text>')
        body.append(f'<text x="{x0 + 36:.1f}" y="{y0 + ph - 20:.1f}" text-anchor="end" font-size="9">{lo:.3g}</text>')
        body.append(_polyline(sx(times), sy(truth[:, s]), TRUTH_STYLE, "truth"))
        body.append(_polyline(sx(times), sy(pred[:, s]), PRED_STYLE, "prediction"))
        body.append("</g>")
    body.append(f'<text x="{WIDTH - 12}" y="{HEIGHT - 8}" text-anchor="end" font-size="11">dashed: ground truth, solid: prediction</text>')
    return _doc(body, title)


def loss_curve_svg(history: Sequence[dict], title: str = "Training loss") -> str:
    its = np.array([r["iter"] for r in history if "loss_total" in r], dtype=float)
    loss = np.array([r["loss_total"] for r in history if "loss_total" in r], dtype=float)
    body = []
    if len(its):
        logl = np.log10(np.maximum(loss, 1e-30))
        sx = _scale(its.min(), its.max(), 80, WIDTH - 30)
        sy = _scale(float(logl.min()), float(logl.max()), HEIGHT - 50, 50)
        body.append(f'<rect x="80" y="50" width="{WIDTH - 110}" height="{HEIGHT - 100}" fill="none" stroke="#999"/>')
        body.append(_polyline(sx(its), sy(logl), PRED_STYLE, "loss"))
        val = [(r["iter"], r["val_rmse"]) for r in history if r.get("val_rmse") is not None]
        if val:
            vi, vr = zip(*val)
            body.append(_polyline(sx(vi), sy(np.log10(np.maximum(np.square(vr), 1e-30))), TRUTH_STYLE, "val"))
        body.append(f'<text x="74" y="56" text-anchor="end" font-size="10">1e{logl.max():.1f}</text>')
        body.append(f'<text x="74" y="{HEIGHT - 50}" text-anchor="end" font-size="10">1e{logl.min():.1f}</text>')
        body.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 20}" text-anchor="middle" font-size="12">iteration</text>')
        body.append(f'<text x="{WIDTH - 30}" y="44" text-anchor="end" font-size="11">solid: total loss, dashed: validation RMSE squared</text>')
    return _doc(body, title)


def _color(v: float, lo: float, hi: float, diverging: bool) -> str:
    if diverging:
        m = max(abs(lo), abs(hi), 1e-30)
        t = 0.5 + 0.5 * v / m
        r, g, b = (int(255 * min(1, 2 * t)), int(255 * (1 - abs(2 * t - 1))), int(255 * min(1, 2 - 2 * t)))
        return f"rgb({r},{g},{b})"
    t = 0.0 if hi <= lo else (v - lo) / (hi - lo)
    return f"rgb({int(255 * t)},{int(80 + 100 * (1 - t))},{int(255 * (1 - t))})"


def heatmap_svg(values, species: Sequence[str], title: str, diverging: bool = False) -> str:
    """``values[t, species]`` as a grid: time down the rows, species across."""
    values = np.asarray(values, dtype=float)
    T, n = values.shape
    lo, hi = float(values.min()), float(values.max())
    cw, ch = (WIDTH - 120) / n, (HEIGHT - 110) / T
    body = []
    for t in range(T):
        body.append(f'<text x="56" y="{50 + (t + 0.7) * ch:.1f}" text-anchor="end" font-size="10">t{t + 1}</text>')
        for s in range(n):
            body.append(
                f'<rect x="{60 + s * cw:.2f}" y="{40 + t * ch:.2f}" width="{cw:.2f}" height="{ch:.2f}" '
                f'fill="{_color(values[t, s], lo, hi, diverging)}"><title>{escape(str(species[s]))} t{t + 1}: {values[t, s]:.4g}</title></rect>'
            )
    for s in range(n):
        x = 60 + (s + 0.5) * cw
        body.append(f'<text x="{x:.1f}" y="{HEIGHT - 55}" font-size="9" transform="rotate(60 {x:.1f} {HEIGHT - 55})">{escape(str(species[s]))}</text>')
    body.append(f'<text x="{WIDTH - 10}" y="{HEIGHT - 8}" text-anchor="end" font-size="10">range [{lo:.3g}, {hi:.3g}]</text>')
    return _doc(body, title)


def write_svg(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path
