"""Tiny SVG line-chart writer for the per-phase percentage curves.

Hand-rolled so report artifacts stay dependency-free and byte-stable.
"""

from __future__ import annotations

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]

W, H = 640, 360
MARGIN = 48


def _scale(values, lo, hi, out_lo, out_hi):
    span = (hi - lo) or 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def _polyline(xs, ys, color, dashed=False):
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    dash = ' stroke-dasharray="6,4"' if dashed else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{pts}"/>'


def percentage_chart(report, path, metric="logloss_pct") -> None:
    """One line per (model, policy) across the four phases; meta arms are
    solid, the random baseline dashed."""
    from .experiment import PHASES

    agg = report.aggregates()
    series = {}
    for a in agg:
        series.setdefault((a["model"], a["policy"]), {})[a["phase"]] = a[f"{metric}_mean"]

    all_vals = [v for s in series.values() for v in s.values()]
    lo, hi = min(all_vals + [0.0]), max(all_vals + [0.0])
    pad = 0.06 * ((hi - lo) or 1.0)
    lo, hi = lo - pad, hi + pad

    xs = _scale(range(len(PHASES)), 0, len(PHASES) - 1, MARGIN, W - MARGIN)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
    ]
    zero_y = _scale([0.0], lo, hi, H - MARGIN, MARGIN)[0]
    parts.append(
        f'<line x1="{MARGIN}" y1="{zero_y:.1f}" x2="{W - MARGIN}" y2="{zero_y:.1f}" '
        'stroke="#999" stroke-width="1"/>'
    )
    for i, phase in enumerate(PHASES):
        parts.append(
            f'<text x="{xs[i]:.1f}" y="{H - MARGIN + 18}" font-size="12" '
            f'text-anchor="middle">{phase}</text>'
        )
    for tick in (lo, 0.0, hi):
        y = _scale([tick], lo, hi, H - MARGIN, MARGIN)[0]
        parts.append(
            f'<text x="{MARGIN - 6}" y="{y + 4:.1f}" font-size="11" '
            f'text-anchor="end">{tick:+.1f}%</text>'
        )

    models = sorted({m for m, _ in series})
    for (model, policy), by_phase in sorted(series.items()):
        ys = _scale([by_phase[p] for p in PHASES], lo, hi, H - MARGIN, MARGIN)
        color = PALETTE[models.index(model) % len(PALETTE)]
        parts.append(_polyline(xs, ys, color, dashed=(policy == "random")))
    for i, model in enumerate(models):
        y = MARGIN + 16 * i
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<rect x="{W - 150}" y="{y - 9}" width="12" height="3" fill="{color}"/>')
        parts.append(f'<text x="{W - 132}" y="{y}" font-size="12">{model}</text>')
    parts.append(
        f'<text x="{MARGIN}" y="{MARGIN - 18}" font-size="13">{metric} by phase '
        '(dashed = random init)</text>'
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
