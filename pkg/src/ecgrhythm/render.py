"""Static SVG rendering of an interpretation over its signal.

Wave spans are colour-coded (P green, QRS blue, T yellow), deleted evidence
is drawn in grey, and episode labels run along the top of the strip.
"""

from __future__ import annotations

import numpy as np

from .interpretation import Interpretation
from .signal_io import Record

_COLORS = {"p": "#2e7d32", "qrs": "#1565c0", "t": "#f9a825"}
_DELETED = "#9e9e9e"
_INSERTED = "#6a1b9a"

_PX_PER_S = 90.0
_HEIGHT = 320
_TOP = 48
_BOTTOM = 24


def render_interpretation(itp: Interpretation, r: Record) -> str:
    x = r.samples
    fs = r.fs
    duration = x.size / fs
    width = max(320, int(round(duration * _PX_PER_S)) + 40)
    plot_h = _HEIGHT - _TOP - _BOTTOM
    lo = float(x.min())
    hi = float(x.max())
    span = (hi - lo) or 1.0

    def sx(sample_idx: float) -> float:
        return 20.0 + (sample_idx / fs) * _PX_PER_S

    def sy(value: float) -> float:
        return _TOP + (hi - value) / span * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{_HEIGHT}" '
        f'viewBox="0 0 {width} {_HEIGHT}">',
        f'<rect width="{width}" height="{_HEIGHT}" fill="white"/>',
    ]

    # wave spans under the trace
    for b in itp.beats:
        spans = [("qrs", b.qrs_onset, b.qrs_offset)]
        if b.p is not None:
            spans.append(("p", b.p.onset, b.p.offset))
        if b.t is not None:
            spans.append(("t", b.t.onset, b.t.offset))
        for kind, a, z in spans:
            parts.append(
                f'<rect x="{sx(a):.2f}" y="{_TOP}" width="{max(sx(z) - sx(a), 1.0):.2f}" '
                f'height="{plot_h}" fill="{_COLORS[kind]}" fill-opacity="0.18"/>')

    # deleted / inserted evidence markers
    for e in itp.edits:
        color = _DELETED if e.op == "del" else _INSERTED
        px = sx(e.sample_index)
        parts.append(
            f'<line x1="{px:.2f}" y1="{_TOP}" x2="{px:.2f}" y2="{_TOP + plot_h}" '
            f'stroke="{color}" stroke-width="3" stroke-dasharray="6,3"/>')

    # signal polyline (decimated to at most ~4 points per pixel)
    step = max(1, int(fs / _PX_PER_S / 4))
    pts = " ".join(
        f"{sx(i):.2f},{sy(float(x[i])):.2f}" for i in range(0, x.size, step))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#111" stroke-width="1"/>')

    # episode band along the top
    for k, ep in enumerate(itp.episodes):
        first = itp.beats[ep.first].qrs_peak
        last = itp.beats[ep.last].qrs_peak
        x0 = sx(first)
        x1 = max(sx(last), x0 + 2.0)
        fill = "#2e7d32" if ep.pattern == "SINUS" else ("#b71c1c" if ep.pattern != "UNEXPLAINED" else "#757575")
        parts.append(
            f'<rect x="{x0:.2f}" y="10" width="{x1 - x0:.2f}" height="14" '
            f'fill="{fill}" fill-opacity="0.35"/>')
        parts.append(
            f'<text x="{x0 + 2:.2f}" y="21" font-family="sans-serif" font-size="11" '
            f'fill="#111">{ep.pattern}</text>')
        del k
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
