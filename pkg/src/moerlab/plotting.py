"""Loss-curve plots as plain SVG 1.1.

One ``<polyline>`` per run CSV (``step,train_loss,eval_loss``), eval loss on the
y axis, legend entries taken from the file names. Larger losses sit higher on
the page, so a decreasing series has increasing SVG y coordinates.
"""
import csv
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 20, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class PlotError(ValueError):
    pass


def read_curve(path, column="eval_loss"):
    """``(steps, values)`` from a run CSV."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotError(f"{path}: no data rows")
    if column not in rows[0] or "step" not in rows[0]:
        raise PlotError(f"{path}: needs 'step' and '{column}' columns")
    try:
        steps = [int(r["step"]) for r in rows]
        values = [float(r[column]) for r in rows]
    except (TypeError, ValueError) as exc:
        raise PlotError(f"{path}: unparsable value ({exc})") from None
    return steps, values


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(curves, title="eval loss", ylabel="eval loss"):
    """SVG text for ``curves``, a list of ``(label, steps, values)`` on one step grid."""
    if not curves:
        raise PlotError("nothing to plot")
    grid = curves[0][1]
    for label, steps, _ in curves:
        if steps != grid:
            raise PlotError(f"{label}: step grid differs from {curves[0][0]}")
    x_lo, x_hi = min(grid), max(grid)
    ys = [v for _, _, vals in curves for v in vals]
    y_lo, y_hi = min(ys), max(ys)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(s):
        return LEFT + (0.0 if x_hi == x_lo else (s - x_lo) / (x_hi - x_lo)) * pw

    def py(v):
        return TOP + (y_hi - v) / (y_hi - y_lo) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for s in _ticks(x_lo, x_hi):
        out.append(f'<text x="{px(s):.2f}" y="{TOP + ph + 16}" font-size="11" text-anchor="middle">'
                   f'{s:g}</text>')
    for v in _ticks(y_lo, y_hi):
        out.append(f'<text x="{LEFT - 6}" y="{py(v) + 4:.2f}" font-size="11" text-anchor="end">'
                   f'{v:.3g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" font-size="13" '
               f'text-anchor="middle">step</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, steps, vals) in enumerate(curves):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(s):.3f},{py(v):.3f}" for s, v in zip(steps, vals))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly - 4}" x2="{LEFT + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 36}" y="{ly}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csvs(paths, out_path, column="eval_loss"):
    curves = []
    for p in paths:
        steps, vals = read_curve(p, column)
        curves.append((Path(p).stem, steps, vals))
    text = render_svg(curves, ylabel=column.replace("_", " "))
    Path(out_path).write_text(text, encoding="utf-8")
    return text
