"""Minimal SVG writers (step curves and a heat map) with no plotting dependency."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")

W, H, PAD = 480, 320, 48


def _frame(title, xlabel, ylabel, x0, x1, y0, y1):
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
             f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
             f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>']
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        px, py = PAD + frac * (W - 2 * PAD), H - PAD - frac * (H - 2 * PAD)
        parts.append(f'<text x="{px:.1f}" y="{H - PAD + 14}" text-anchor="middle">{xv:.3g}</text>')
        parts.append(f'<text x="{PAD - 4}" y="{py + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    return parts


def _scaler(x0, x1, y0, y1):
    dx = (x1 - x0) or 1.0
    dy = (y1 - y0) or 1.0

    def sx(x):
        return PAD + (x - x0) / dx * (W - 2 * PAD)

    def sy(y):
        return H - PAD - (y - y0) / dy * (H - 2 * PAD)

    return sx, sy


def step_plot(path, series: dict[str, tuple[list, list]], title="", xlabel="", ylabel="",
              bands: dict[str, tuple[list, list]] | None = None, y_range=(0.0, 1.0), start=None):
    """Right-continuous step curves; ``bands`` maps a series name to (lower, upper)."""
    xs = [x for xv, _ in series.values() for x in xv]
    x0 = min(xs) if start is None else start
    x1 = max(xs) if xs else 1.0
    if start is not None and xs:
        x0 = min(start, min(xs))
    y0, y1 = y_range
    sx, sy = _scaler(x0, x1, y0, y1)
    parts = _frame(title, xlabel, ylabel, x0, x1, y0, y1)
    for i, (name, (xv, yv)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if bands and name in bands:
            lo, hi = bands[name]
            upper = [(sx(x), sy(h)) for x, h in zip(xv, hi)]
            lower = [(sx(x), sy(l)) for x, l in zip(xv, lo)][::-1]
            pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in upper + lower)
            if pts:
                parts.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        d, prev = [], None
        first_y = 1.0 if start is not None else (yv[0] if yv else 0.0)
        if start is not None:
            d.append(f"M{sx(x0):.1f},{sy(first_y):.1f}")
            prev = first_y
        for x, y in zip(xv, yv):
            if prev is None:
                d.append(f"M{sx(x):.1f},{sy(y):.1f}")
            else:
                d.append(f"L{sx(x):.1f},{sy(prev):.1f} L{sx(x):.1f},{sy(y):.1f}")
            prev = y
        parts.append(f'<path d="{" ".join(d)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{W - PAD - 4}" y="{PAD + 14 * i}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def heatmap(path, labels: list[str], matrix, title="", lo=-1.0, hi=1.0):
    n = len(labels)
    cell = min((W - 2 * PAD - 60) / max(n, 1), (H - 2 * PAD) / max(n, 1))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="9">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>']
    left, top = PAD + 60, PAD
    for i in range(n):
        parts.append(f'<text x="{left - 4}" y="{top + (i + 0.6) * cell:.1f}" text-anchor="end">{escape(labels[i])}</text>')
        parts.append(f'<text x="{left + (i + 0.5) * cell:.1f}" y="{top - 4}" text-anchor="middle">{escape(labels[i])}</text>')
        for j in range(n):
            v = float(matrix[i][j])
            f = min(max((v - lo) / (hi - lo), 0.0), 1.0)
            r, b = int(255 * f), int(255 * (1 - f))
            parts.append(f'<rect x="{left + j * cell:.1f}" y="{top + i * cell:.1f}" width="{cell:.1f}" '
                         f'height="{cell:.1f}" fill="rgb({r},64,{b})"/>')
            parts.append(f'<text x="{left + (j + 0.5) * cell:.1f}" y="{top + (i + 0.6) * cell:.1f}" '
                         f'text-anchor="middle" fill="white">{v:.2f}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
