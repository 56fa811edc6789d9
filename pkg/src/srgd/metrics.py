"""Evaluation metrics: hard Dice, landmark error, folding volume, Wilcoxon test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

import numpy as np

from .gridmath import Grid, ShapeError
from .warp import sample_at

EXACT_WILCOXON_MAX_N = 20
ALPHA = 0.01


@dataclass
class LandmarkSet:
    points: np.ndarray  # (N, 2) as (y, x)
    spacing: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    def __len__(self) -> int:
        return len(self.points)

    def within(self, h: int, w: int) -> bool:
        p = self.points
        return bool(np.all((p >= 0) & (p[:, :1] <= h - 1) & (p[:, 1:] <= w - 1)))


# column order of MetricReport CSV rows
REPORT_COLUMNS = ("setting", "seed", "eval", "pair", "mean_dsc", "tre_mean", "tre_std",
                  "ndv_percent")


@dataclass
class MetricReport:
    sample_id: str
    dsc_per_label: dict[int, float] = field(default_factory=dict)
    mean_dsc: float = float("nan")
    tre_mean: float = float("nan")
    tre_std: float = float("nan")
    ndv_percent: float = 0.0

    def row(self, setting: str, seed: int, eval_setting: str) -> dict[str, str]:
        return {
            "setting": setting,
            "seed": str(seed),
            "eval": eval_setting,
            "pair": self.sample_id,
            "mean_dsc": _fmt(self.mean_dsc),
            "tre_mean": _fmt(self.tre_mean),
            "tre_std": _fmt(self.tre_std),
            "ndv_percent": _fmt(self.ndv_percent),
        }


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(float(v))


def hard_dice(seg_a, seg_b, labels: Iterable[int]) -> dict[int, float]:
    """Per-label Dice; labels absent from both maps are left out."""
    a = np.asarray(seg_a.data if isinstance(seg_a, Grid) else seg_a)
    b = np.asarray(seg_b.data if isinstance(seg_b, Grid) else seg_b)
    if a.shape != b.shape:
        raise ShapeError(f"segmentation shapes differ: {a.shape} vs {b.shape}")
    labels = list(labels)
    if not labels:
        raise ValueError("empty label set")
    out = {}
    for lab in labels:
        ma = a == lab
        mb = b == lab
        size = int(ma.sum()) + int(mb.sum())
        if size == 0:
            continue
        out[int(lab)] = 2.0 * int(np.logical_and(ma, mb).sum()) / size
    return out


def mean_dice(per_label: dict[int, float]) -> float:
    return float(np.mean(list(per_label.values()))) if per_label else float("nan")


def tre(lms_fixed: LandmarkSet, lms_moving: LandmarkSet, d) -> tuple[float, float]:
    """Mean and standard deviation of landmark error after mapping by ``d``.

    ``d`` is sampled at the fixed landmarks, matching the pull convention of
    :func:`srgd.warp.warp_image`.
    """
    if len(lms_fixed) != len(lms_moving):
        raise ShapeError("landmark counts differ")
    errs = landmark_errors(lms_fixed, lms_moving, d)
    return float(errs.mean()), float(errs.std())


def landmark_errors(lms_fixed: LandmarkSet, lms_moving: LandmarkSet, d) -> np.ndarray:
    disp = d if isinstance(d, Grid) else Grid(d)
    fp = lms_fixed.points
    mapped = fp + sample_at(disp, fp).data.T
    return np.linalg.norm(mapped - lms_moving.points, axis=1) * lms_fixed.spacing


def _signed_area(a, b, c) -> np.ndarray:
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def ndv(d) -> float:
    """Percentage of cell area whose mapping ``p -> p + d(p)`` flips orientation.

    Each unit cell is split along both diagonals into four triangles, each
    weighted by one half, so every cell contributes total weight 2 x area.
    """
    disp = d.data if isinstance(d, Grid) else np.asarray(d, dtype=np.float64)
    _, h, w = disp.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    # (x, y) ordering keeps a counter-clockwise orientation positive
    px = xx + disp[1]
    py = yy + disp[0]
    c00 = (px[:-1, :-1], py[:-1, :-1])
    c01 = (px[:-1, 1:], py[:-1, 1:])
    c10 = (px[1:, :-1], py[1:, :-1])
    c11 = (px[1:, 1:], py[1:, 1:])
    tris = [
        (c00, c01, c11), (c00, c11, c10),  # diagonal 00-11
        (c00, c01, c10), (c01, c11, c10),  # diagonal 01-10
    ]
    negative = np.zeros_like(px[:-1, :-1])
    for tri in tris:
        area = _signed_area(*tri)
        negative += 0.5 * np.where(area < 0, -area, 0.0)
    # a cell can fold over more than its own area; cap so NDV stays a percentage
    negative = np.minimum(negative, 1.0)
    cells = (h - 1) * (w - 1)
    return float(100.0 * negative.sum() / cells)


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@lru_cache(maxsize=64)
def _exact_null(ranks2: tuple[int, ...]) -> tuple[np.ndarray, int]:
    # distribution of 2*W+ over all sign patterns; doubled ranks stay integral
    total = sum(ranks2)
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts, total


def wilcoxon_signed_rank(x, y) -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test.

    Returns ``(W, p)`` where ``W`` is the sum of ranks of positive differences
    ``x - y``. Zero differences are dropped and ties share their average rank.
    The p-value is exact for up to 20 non-zero differences and otherwise uses
    the tie-corrected normal approximation with continuity correction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("wilcoxon needs two equal-length 1-D samples")
    if len(x) < 5:
        raise ValueError("wilcoxon needs at least 5 pairs")
    diff = x - y
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        raise ValueError("all paired differences are zero")
    ranks = _ranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        ranks2 = tuple(sorted(int(round(2 * r)) for r in ranks))
        counts, total = _exact_null(ranks2)
        obs = int(round(2 * w_plus))
        mirror = total - obs
        lo, hi = min(obs, mirror), max(obs, mirror)
        tail = sum(counts[:lo + 1]) + sum(counts[hi:])
        if lo == hi:
            tail = sum(counts)
        p = min(1.0, float(tail) / float(2 ** n))
        return w_plus, p
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(diff), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    z = (abs(w_plus - mu) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return w_plus, min(1.0, p)
