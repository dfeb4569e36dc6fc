"""Minimal static SVG line plots for sweep summaries. No dependencies."""

from __future__ import annotations

__all__ = ["line_plot_svg"]

_W, _H, _PAD = 480, 320, 48


def _scale(vals, lo, hi, out_lo, out_hi):
    span = (hi - lo) or 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in vals]


def line_plot_svg(xs, series: dict, title: str = "", x_label: str = "") -> str:
    """One polyline per named series over shared numeric x values."""
    xs = [float(x) for x in xs]
    all_y = [float(v) for vals in series.values() for v in vals]
    if not xs or not all_y:
        return "<svg xmlns='http://www.w3.org/2000/svg'/>"
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(all_y), max(all_y)
    pad_y = 0.05 * ((y_hi - y_lo) or 1.0)
    y_lo, y_hi = y_lo - pad_y, y_hi + pad_y
    px = _scale(xs, x_lo, x_hi, _PAD, _W - _PAD)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]

    parts = [
        f"<svg xmlns='http://www.w3.org/2000/svg' width='{_W}' height='{_H}' "
        f"font-family='sans-serif' font-size='11'>",
        f"<rect width='{_W}' height='{_H}' fill='white'/>",
        f"<text x='{_W / 2}' y='18' text-anchor='middle' font-size='13'>{title}</text>",
        f"<line x1='{_PAD}' y1='{_H - _PAD}' x2='{_W - _PAD}' y2='{_H - _PAD}' stroke='black'/>",
        f"<line x1='{_PAD}' y1='{_PAD}' x2='{_PAD}' y2='{_H - _PAD}' stroke='black'/>",
        f"<text x='{_W / 2}' y='{_H - 12}' text-anchor='middle'>{x_label}</text>",
    ]
    for tick in (y_lo + pad_y, (y_lo + y_hi) / 2, y_hi - pad_y):
        ty = _scale([tick], y_lo, y_hi, _H - _PAD, _PAD)[0]
        parts.append(f"<text x='{_PAD - 6}' y='{ty + 4}' text-anchor='end'>{tick:.3g}</text>")
        parts.append(
            f"<line x1='{_PAD - 3}' y1='{ty}' x2='{_PAD}' y2='{ty}' stroke='black'/>"
        )
    for x, tx in zip(xs, px):
        parts.append(
            f"<text x='{tx}' y='{_H - _PAD + 16}' text-anchor='middle'>{x:.3g}</text>"
        )
    for i, (name, vals) in enumerate(series.items()):
        color = colors[i % len(colors)]
        py = _scale([float(v) for v in vals], y_lo, y_hi, _H - _PAD, _PAD)
        points = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
        parts.append(f"<polyline points='{points}' fill='none' stroke='{color}' stroke-width='1.5'/>")
        for a, b in zip(px, py):
            parts.append(f"<circle cx='{a:.1f}' cy='{b:.1f}' r='2.5' fill='{color}'/>")
        parts.append(
            f"<text x='{_W - _PAD + 4}' y='{_PAD + 14 * i + 10}' fill='{color}'>{name}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts)
