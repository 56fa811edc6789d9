"""Summaries, significance marks and SVG box plots from evaluation CSVs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from html import escape
from typing import Iterable, Sequence

import numpy as np

from .metrics import ALPHA, wilcoxon_signed_rank

logger = logging.getLogger(__name__)

METRICS = ("mean_dsc", "tre_mean", "ndv_percent")
SUMMARY_COLUMNS = ("setting", "eval", "n", "mean_dsc", "std_dsc", "tre_mean", "std_tre",
                   "ndv_mean", "ndv_max")
SIGNIFICANCE_COLUMNS = ("eval", "metric", "baseline", "w", "p", "mark", "note")
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


@dataclass
class Significance:
    eval: str
    metric: str
    baseline: str
    w: float
    p: float
    mark: str
    note: str = ""

    def row(self) -> dict[str, str]:
        return {"eval": self.eval, "metric": self.metric, "baseline": self.baseline,
                "w": "nan" if self.w != self.w else repr(self.w),
                "p": "nan" if self.p != self.p else repr(self.p),
                "mark": self.mark, "note": self.note}


def _ordered(values: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for v in values:
        seen.setdefault(v, None)
    return list(seen)


def summarize(rows: Sequence[dict[str, str]]) -> list[dict[str, str]]:
    """Mean and std per ``(setting, eval)`` over every seed and pair."""
    out = []
    for setting in _ordered(r["setting"] for r in rows):
        for ev in _ordered(r["eval"] for r in rows):
            sel = [r for r in rows if r["setting"] == setting and r["eval"] == ev]
            if not sel:
                continue
            dsc = np.array([float(r["mean_dsc"]) for r in sel])
            t = np.array([float(r["tre_mean"]) for r in sel])
            nd = np.array([float(r["ndv_percent"]) for r in sel])
            out.append({
                "setting": setting, "eval": ev, "n": str(len(sel)),
                "mean_dsc": repr(float(dsc.mean())), "std_dsc": repr(float(dsc.std())),
                "tre_mean": repr(float(t.mean())), "std_tre": repr(float(t.std())),
                "ndv_mean": repr(float(nd.mean())), "ndv_max": repr(float(nd.max())),
            })
    return out


def per_pair(rows: Sequence[dict[str, str]], setting: str, ev: str, metric: str
             ) -> dict[str, float]:
    """Metric per test pair, averaged over seeds."""
    acc: dict[str, list[float]] = {}
    for r in rows:
        if r["setting"] == setting and r["eval"] == ev:
            acc.setdefault(r["pair"], []).append(float(r[metric]))
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def compare(rows: Sequence[dict[str, str]], metric: str, reference: str = "ours",
            alpha: float = ALPHA) -> list[Significance]:
    """Paired Wilcoxon test of ``reference`` against every other setting.

    Pairs are matched by test-pair id after averaging over seeds. Cases the
    test cannot handle (all-zero differences, too few pairs) are marked
    ``n.s.`` with a note.
    """
    settings = _ordered(r["setting"] for r in rows)
    if reference not in settings:
        logger.warning("no %r rows; skipping significance tests", reference)
        return []
    out = []
    for ev in _ordered(r["eval"] for r in rows):
        ref = per_pair(rows, reference, ev, metric)
        for base in settings:
            if base == reference:
                continue
            other = per_pair(rows, base, ev, metric)
            keys = sorted(set(ref) & set(other))
            if not keys:
                continue
            try:
                w, p = wilcoxon_signed_rank([ref[k] for k in keys], [other[k] for k in keys])
            except ValueError as e:
                out.append(Significance(ev, metric, base, float("nan"), float("nan"), "n.s.",
                                        str(e)))
                continue
            out.append(Significance(ev, metric, base, w, p, "*" if p < alpha else "n.s."))
    return out


# ------------------------------------------------------------------- SVG

def box_stats(values: Sequence[float]) -> dict[str, object]:
    """Quartiles, 1.5 IQR whiskers (clipped to the data) and outliers."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("box plot of an empty sample")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return {"q1": float(q1), "median": float(med), "q3": float(q3),
            "lo": float(inside.min()), "hi": float(inside.max()),
            "outliers": [float(x) for x in v if x < inside.min() or x > inside.max()]}


def _f(x: float) -> str:
    return f"{x:.2f}"


def box_plot_svg(rows: Sequence[dict[str, str]], metric: str, title: str = "",
                 marks: Sequence[Significance] = ()) -> str:
    """Grouped box plot: one group per eval condition, one box per setting."""
    settings = _ordered(r["setting"] for r in rows)
    evals = _ordered(r["eval"] for r in rows)
    groups = [[per_pair(rows, s, ev, metric) for s in settings] for ev in evals]
    all_vals = [v for g in groups for d in g for v in d.values()]
    if not all_vals:
        raise ValueError(f"no values for metric {metric!r}")
    lo, hi = min(all_vals), max(all_vals)
    pad = (hi - lo) * 0.08 or 0.5
    lo, hi = lo - pad, hi + pad

    box_w, gap, group_gap = 18.0, 6.0, 30.0
    left, top, plot_h = 60.0, 40.0, 240.0
    group_w = len(settings) * (box_w + gap)
    width = left + len(evals) * (group_w + group_gap) + 140.0
    height = top + plot_h + 50.0

    def y(v: float) -> float:
        return top + plot_h * (hi - v) / (hi - lo)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{_f(left)}" y="20" font-size="13">{escape(title or metric)}</text>',
        f'<line x1="{_f(left)}" y1="{_f(top)}" x2="{_f(left)}" y2="{_f(top + plot_h)}" '
        f'stroke="black"/>',
    ]
    for t in np.linspace(lo, hi, 5):
        parts.append(f'<text x="{_f(left - 6)}" y="{_f(y(t) + 4)}" text-anchor="end">'
                     f'{t:.3g}</text>')
        parts.append(f'<line x1="{_f(left - 3)}" y1="{_f(y(t))}" x2="{_f(left)}" '
                     f'y2="{_f(y(t))}" stroke="black"/>')
    mark_at = {(m.eval, m.baseline): m.mark for m in marks}
    for gi, ev in enumerate(evals):
        x0 = left + group_gap / 2 + gi * (group_w + group_gap)
        parts.append(f'<text x="{_f(x0 + group_w / 2)}" y="{_f(top + plot_h + 18)}" '
                     f'text-anchor="middle">{escape(ev)}</text>')
        for si, s in enumerate(settings):
            vals = list(groups[gi][si].values())
            if not vals:
                continue
            st = box_stats(vals)
            cx = x0 + si * (box_w + gap) + box_w / 2
            color = PALETTE[si % len(PALETTE)]
            parts += [
                f'<line x1="{_f(cx)}" y1="{_f(y(st["hi"]))}" x2="{_f(cx)}" '
                f'y2="{_f(y(st["lo"]))}" stroke="black"/>',
                f'<rect x="{_f(cx - box_w / 2)}" y="{_f(y(st["q3"]))}" width="{_f(box_w)}" '
                f'height="{_f(max(y(st["q1"]) - y(st["q3"]), 0.5))}" fill="{color}" '
                f'stroke="black"/>',
                f'<line x1="{_f(cx - box_w / 2)}" y1="{_f(y(st["median"]))}" '
                f'x2="{_f(cx + box_w / 2)}" y2="{_f(y(st["median"]))}" stroke="black" '
                f'stroke-width="2"/>',
            ]
            for o in st["outliers"]:
                parts.append(f'<circle cx="{_f(cx)}" cy="{_f(y(o))}" r="2" fill="none" '
                             f'stroke="black"/>')
            mark = mark_at.get((ev, s))
            if mark:
                parts.append(f'<text x="{_f(cx)}" y="{_f(top - 6)}" text-anchor="middle">'
                             f'{escape(mark)}</text>')
    lx = left + len(evals) * (group_w + group_gap) + 10
    for si, s in enumerate(settings):
        ly = top + 14 * si
        parts.append(f'<rect x="{_f(lx)}" y="{_f(ly)}" width="10" height="10" '
                     f'fill="{PALETTE[si % len(PALETTE)]}"/>')
        parts.append(f'<text x="{_f(lx + 14)}" y="{_f(ly + 9)}">{escape(s)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
