"""Render an evaluation report as a small bar-chart SVG.

FoE lives on its own axis (it is an odds ratio); MAP and recall@K share
a [0, 1] axis. Output is plain text with a fixed layout so identical
reports give identical files.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

from .evaluation import EvalReport

WIDTH, HEIGHT = 560, 300
TOP, BOTTOM = 40, 250
BAR = 44
GAP = 16


def _bar(x: float, value: float, scale: float, label: str, colour: str) -> list[str]:
    h = 0.0 if scale <= 0 else (BOTTOM - TOP) * min(value / scale, 1.0)
    y = BOTTOM - h
    return [
        f'  <rect x="{x:.1f}" y="{y:.1f}" width="{BAR}" height="{h:.1f}" fill="{colour}"/>',
        f'  <text x="{x + BAR / 2:.1f}" y="{y - 6:.1f}" text-anchor="middle" font-size="12">{value:.3f}</text>',
        f'  <text x="{x + BAR / 2:.1f}" y="{BOTTOM + 18}" text-anchor="middle" font-size="12">{escape(label)}</text>',
    ]


def emit_report_svg(report: EvalReport, title: str = "Retrieval metrics") -> str:
    """One bar per metric; values printed with three decimals."""
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
        f'  <text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'  <line x1="20" y1="{BOTTOM}" x2="{WIDTH - 20}" y2="{BOTTOM}" stroke="black"/>',
    ]
    x = 40.0
    # the FoE axis tops out at the next power of ten above the value
    foe_scale = 10.0
    while foe_scale < report.foe:
        foe_scale *= 10.0
    lines += _bar(x, report.foe, foe_scale, "FoE", "#4c72b0")
    lines.append(f'  <text x="{x - 4:.1f}" y="{TOP - 4}" font-size="10">max {foe_scale:g}</text>')
    x += BAR + 3 * GAP
    lines.append(f'  <line x1="{x - 1.5 * GAP:.1f}" y1="{TOP}" x2="{x - 1.5 * GAP:.1f}" y2="{BOTTOM}" '
                 'stroke="#999" stroke-dasharray="4 3"/>')
    metrics = [("MAP", report.map)] + [(f"R@{k}", v) for k, v in sorted(report.recall_at.items())]
    for label, value in metrics:
        lines += _bar(x, value, 1.0, label, "#55a868" if label == "MAP" else "#c44e52")
        x += BAR + GAP
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
