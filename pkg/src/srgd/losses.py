"""Similarity terms, the diffusion regularizer and the assembled objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gridmath as gm
from .gridmath import DomainError, Grid, ShapeError
from .warp import sample_at, warp_image, warp_onehot

NCC_EPS = 1e-5
DICE_EPS = 1e-6
CR_EPS = 1e-12
# added inside logs; below ~1e-284 it leaves any positive double unchanged
_LOG_FLOOR = 1e-300

SIMILARITIES = ("mse", "ncc", "mi", "cr", "dice")


@dataclass(frozen=True)
class LossConfig:
    similarity: str = "mse"
    lam: float = 1.0
    ncc_window: int = 9
    mi_bins: int = 32
    mi_sigma: float = 0.5
    cr_bins: int = 32
    tre_weight: float = 0.0

    def __post_init__(self):
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be odd and >= 3")
        if self.mi_bins < 8 or self.cr_bins < 8:
            raise ValueError("histogram bins must be >= 8")
        if self.mi_sigma <= 0:
            raise ValueError("mi_sigma must be positive")
        if self.tre_weight < 0:
            raise ValueError("tre_weight must be non-negative")


def _same_shape(a: Grid, b: Grid) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def mse(a, b) -> Grid:
    a, b = gm.as_grid(a), gm.as_grid(b)
    _same_shape(a, b)
    diff = a - b
    return gm.mean(diff * diff)


def ncc(a, b, window: int = 9, eps: float = NCC_EPS) -> Grid:
    """``1 - mean`` of the squared local correlation coefficient.

    Window statistics use only in-bounds pixels, so border windows are smaller
    rather than padded with zeros.
    """
    a, b = gm.as_grid(a), gm.as_grid(b)
    _same_shape(a, b)
    if window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    count = gm._window_sum(np.ones(a.shape[-2:]), window)
    s_a = gm.window_sum(a, window)
    s_b = gm.window_sum(b, window)
    s_aa = gm.window_sum(a * a, window)
    s_bb = gm.window_sum(b * b, window)
    s_ab = gm.window_sum(a * b, window)
    cross = s_ab - s_a * s_b / count
    var_a = s_aa - s_a * s_a / count
    var_b = s_bb - s_b * s_b / count
    cc = cross * cross / (var_a * var_b + eps)
    return 1.0 - gm.mean(cc)


def _rescale(x: Grid) -> Grid:
    lo, hi = gm.amin(x), gm.amax(x)
    span = hi - lo
    if span.item() <= 0:
        raise DomainError("cannot rescale a constant image")
    return (x - lo) / span


def parzen_weights(x, bins: int, sigma: float) -> Grid:
    """Per-pixel normalized Gaussian bin memberships, shape ``(bins, N)``.

    ``x`` is rescaled to [0, 1]; bin centres are evenly spaced over [0, 1]
    including both ends and ``sigma`` is measured in bin widths.
    """
    x = gm.as_grid(x)
    flat = gm.reshape(_rescale(x), (1, x.data.size))
    centres = np.linspace(0.0, 1.0, bins)[:, None]
    width = 1.0 / (bins - 1)
    z = (flat - centres) / (sigma * width)
    w = gm.exp(z * z * -0.5)
    return w / gm.total(w, axis=0, keepdims=True)


def joint_histogram(a, b, bins: int = 32, sigma: float = 0.5) -> Grid:
    a, b = gm.as_grid(a), gm.as_grid(b)
    _same_shape(a, b)
    wa = parzen_weights(a, bins, sigma)
    wb = parzen_weights(b, bins, sigma)
    return gm.matmul(wa, wb.T) / float(a.data.size)


def _xlogy(p: Grid, q: Grid) -> Grid:
    return p * gm.log(q + _LOG_FLOOR)


def mutual_information_value(a, b, bins: int = 32, sigma: float = 0.5) -> Grid:
    if bins < 8:
        raise ValueError("mutual information needs at least 8 bins")
    p = joint_histogram(a, b, bins, sigma)
    pa = gm.total(p, axis=1, keepdims=True)
    pb = gm.total(p, axis=0, keepdims=True)
    return gm.total(_xlogy(p, p) - _xlogy(p, pa * pb))


def mutual_information(a, b, bins: int = 32, sigma: float = 0.5) -> Grid:
    """Negative Parzen-window mutual information (in nats)."""
    return -mutual_information_value(a, b, bins, sigma)


def correlation_ratio_value(a, b, bins: int = 32, sigma: float = 0.5) -> Grid:
    """Soft-binned ``eta^2(b | a)``: variance of ``b`` explained by bins of ``a``."""
    a, b = gm.as_grid(a), gm.as_grid(b)
    _same_shape(a, b)
    if np.ptp(b.data) == 0:
        raise DomainError("correlation ratio undefined for constant b")
    w = parzen_weights(a, bins, sigma)
    y = gm.reshape(_rescale(b), (b.data.size, 1))
    n = float(b.data.size)
    mass = gm.total(w, axis=1, keepdims=True)
    sums = gm.matmul(w, y)
    within = (gm.total(y * y) - gm.total(sums * sums / (mass + CR_EPS))) / n
    mu = gm.total(y) / n
    var = gm.total(y * y) / n - mu * mu
    return 1.0 - within / var


def correlation_ratio(a, b, bins: int = 32, sigma: float = 0.5) -> Grid:
    return 1.0 - correlation_ratio_value(a, b, bins, sigma)


def soft_dice(warped, fixed, eps: float = DICE_EPS) -> Grid:
    """``1 - mean`` Dice over channels with any support in either map."""
    warped, fixed = gm.as_grid(warped), gm.as_grid(fixed)
    if warped.shape[0] != fixed.shape[0]:
        raise ShapeError(f"channel mismatch {warped.shape[0]} vs {fixed.shape[0]}")
    _same_shape(warped, fixed)
    axes = (1, 2)
    inter = gm.total(warped * fixed, axis=axes)
    denom = gm.total(warped, axis=axes) + gm.total(fixed, axis=axes)
    support = np.flatnonzero(denom.data > 0)
    if support.size == 0:
        return gm.Grid(0.0)
    dice = inter * 2.0 / (denom + eps)
    return 1.0 - gm.mean(dice[support])


def diffusion_reg(d) -> Grid:
    """Mean squared forward-difference gradient, over pixels and channels.

    The difference past the last row or column is taken as zero.
    """
    d = gm.as_grid(d)
    dy = d[:, 1:, :] - d[:, :-1, :]
    dx = d[:, :, 1:] - d[:, :, :-1]
    return (gm.total(dy * dy) + gm.total(dx * dx)) / float(d.data.size)


def tre_loss(d, fixed_points, moving_points) -> Grid:
    """Mean Euclidean landmark error with ``d`` sampled at the fixed points."""
    fp = np.asarray(fixed_points, dtype=np.float64).reshape(-1, 2)
    mp = np.asarray(moving_points, dtype=np.float64).reshape(-1, 2)
    if fp.shape != mp.shape:
        raise ShapeError("landmark counts differ")
    mapped = sample_at(d, fp) + fp.T
    r = mapped - mp.T
    dist = gm.sqrt(gm.total(r * r, axis=0) + 1e-12)
    return gm.mean(dist)


def similarity(cfg: LossConfig, fixed, warped) -> Grid:
    kind = cfg.similarity
    if kind == "mse":
        return mse(fixed, warped)
    if kind == "ncc":
        return ncc(fixed, warped, cfg.ncc_window)
    if kind == "mi":
        return mutual_information(fixed, warped, cfg.mi_bins, cfg.mi_sigma)
    if kind == "cr":
        # directional: variance of the warped moving image explained by the fixed
        return correlation_ratio(fixed, warped, cfg.cr_bins, cfg.mi_sigma)
    return soft_dice(warped, fixed)


def surrogate_objective(s_f, s_m, d, cfg: LossConfig, landmarks=None) -> Grid:
    """Similarity between ``s_f`` and ``s_m`` warped by ``d``, plus regularization.

    ``landmarks`` is an optional ``(fixed_points, moving_points)`` pair used
    when ``cfg.tre_weight`` is positive.
    """
    s_f, s_m, d = gm.as_grid(s_f), gm.as_grid(s_m), gm.as_grid(d)
    if cfg.similarity == "dice":
        warped = warp_onehot(s_m, d)
    else:
        warped = warp_image(s_m, d)
    loss = similarity(cfg, s_f, warped)
    if cfg.lam:
        loss = loss + diffusion_reg(d) * cfg.lam
    if cfg.tre_weight and landmarks is not None:
        loss = loss + tre_loss(d, *landmarks) * cfg.tre_weight
    return loss


def objective(i_f, i_m, d, cfg: LossConfig, landmarks=None) -> Grid:
    """Standard self-supervised loss on the network inputs themselves."""
    return surrogate_objective(i_f, i_m, d, cfg, landmarks)
