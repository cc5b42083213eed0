"""Minimal SVG line plots: mean curve, deviation band, axes, reference line.

Training figures are offline artifacts, so this stays a small deterministic
string emitter rather than a plotting dependency. Multi-run input is reduced
to a per-point mean with a one-standard-deviation band.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

__all__ = ["render_line_plot", "aggregate_runs"]

_W, _H = 680, 420
_ML, _MR, _MT, _MB = 70, 20, 40, 50


def aggregate_runs(ys: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray | None]:
    """Truncate runs to a common length; mean and std per point.

    Returns (mean, std); std is None for a single run. Missing values are
    NaN and propagate as gaps in the rendered line.
    """
    if not ys:
        raise ValueError("no runs to aggregate")
    n = min(len(y) for y in ys)
    stacked = np.stack([np.asarray(y, dtype=np.float64)[:n] for y in ys])
    mean = np.nanmean(stacked, axis=0) if stacked.size else stacked.sum(axis=0)
    std = np.nanstd(stacked, axis=0) if len(ys) > 1 else None
    return mean, std


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi) or hi <= lo:
        lo, hi = lo - 1.0, lo + 1.0
    return list(np.linspace(lo, hi, count))


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def render_line_plot(
    path: str | Path,
    x: np.ndarray,
    mean: np.ndarray,
    std: np.ndarray | None = None,
    *,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    ref: float | None = None,
    ref_label: str = "",
) -> None:
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if x.shape != mean.shape:
        raise ValueError("x and mean must have equal lengths")
    finite = np.isfinite(mean)
    ys = [mean[finite]] if finite.any() else [np.array([0.0])]
    if std is not None:
        ys.append((mean + std)[finite])
        ys.append((mean - std)[finite])
    y_lo = float(min(np.min(y) for y in ys if y.size))
    y_hi = float(max(np.max(y) for y in ys if y.size))
    if ref is not None:
        y_lo, y_hi = min(y_lo, ref), max(y_hi, ref)
    pad = 0.05 * (y_hi - y_lo) or 1.0
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo = float(x.min()) if x.size else 0.0
    x_hi = float(x.max()) if x.size and x.max() > x_lo else x_lo + 1.0

    def sx(v: float) -> float:
        return _ML + (v - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def sy(v: float) -> float:
        return _H - _MB - (v - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="24" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
    ]
    # axes with ticks
    parts.append(
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>'
    )
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>')
    for tick in _ticks(x_lo, x_hi):
        px = sx(tick)
        parts.append(
            f'<line x1="{px:.2f}" y1="{_H - _MB}" x2="{px:.2f}" y2="{_H - _MB + 5}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{px:.2f}" y="{_H - _MB + 18}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{_fmt(tick)}</text>'
        )
    for tick in _ticks(y_lo, y_hi):
        py = sy(tick)
        parts.append(
            f'<line x1="{_ML - 5}" y1="{py:.2f}" x2="{_ML}" y2="{py:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_ML - 8}" y="{py + 4:.2f}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{_fmt(tick)}</text>'
        )
    parts.append(
        f'<text x="{(_ML + _W - _MR) / 2}" y="{_H - 12}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{xlabel}</text>'
    )
    parts.append(
        f'<text x="16" y="{(_MT + _H - _MB) / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {(_MT + _H - _MB) / 2})">{ylabel}</text>'
    )

    if std is not None and finite.any():
        upper = [(sx(a), sy(b)) for a, b in zip(x[finite], (mean + std)[finite])]
        lower = [(sx(a), sy(b)) for a, b in zip(x[finite], (mean - std)[finite])]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in upper + lower[::-1])
        parts.append(f'<polygon points="{pts}" fill="#4878cf" fill-opacity="0.25"/>')

    # break the mean line at gaps
    segment: list[str] = []
    for xi, yi in zip(x, mean):
        if math.isfinite(yi):
            segment.append(f"{sx(xi):.2f},{sy(yi):.2f}")
        elif segment:
            parts.append(
                f'<polyline points="{" ".join(segment)}" fill="none" stroke="#1f4e9c" stroke-width="1.6"/>'
            )
            segment = []
    if segment:
        parts.append(
            f'<polyline points="{" ".join(segment)}" fill="none" stroke="#1f4e9c" stroke-width="1.6"/>'
        )

    if ref is not None:
        py = sy(ref)
        parts.append(
            f'<line x1="{_ML}" y1="{py:.2f}" x2="{_W - _MR}" y2="{py:.2f}" '
            f'stroke="#c23b22" stroke-dasharray="6 4"/>'
        )
        if ref_label:
            parts.append(
                f'<text x="{_W - _MR - 4}" y="{py - 5:.2f}" text-anchor="end" '
                f'font-size="11" fill="#c23b22" font-family="sans-serif">{ref_label}</text>'
            )

    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")
