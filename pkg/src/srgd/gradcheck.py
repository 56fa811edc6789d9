"""Finite-difference gradient checks and the quick oracle suite behind
``srgd selftest``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gridmath as gm
from . import losses
from .gridmath import Grid, Tape
from .model import Arch, regnet_forward, regnet_init
from .warp import warp_image

FD_EPS = 1e-5
REL_TOL = 1e-4
# entries far below the gradient's largest entry are compared against
# this fraction of it, since their differences are swamped by truncation error
SCALE_FLOOR = 1e-3


def rel_error(analytic: float, numeric: float, scale: float = 0.0) -> float:
    """``|a - n| / max(|a|, |n|, SCALE_FLOOR * scale)``."""
    denom = max(abs(analytic), abs(numeric), SCALE_FLOOR * scale, 1e-300)
    return abs(analytic - numeric) / denom


def max_rel_error(fn: Callable[[Grid], Grid], x0: np.ndarray, rng: np.random.Generator,
                  n_coords: int = 20, eps: float = FD_EPS) -> float:
    """Largest relative error between tape and central-difference gradients
    of the scalar ``fn`` at ``n_coords`` random entries of ``x0``."""
    x = Grid(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
        tape.backward(out)
    g = tape.grad(x)
    scale = float(np.abs(g).max())
    worst = 0.0
    for _ in range(n_coords):
        idx = tuple(int(rng.integers(s)) for s in x0.shape)
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (fn(Grid(xp)).item() - fn(Grid(xm)).item()) / (2 * eps)
        worst = max(worst, rel_error(g[idx], fd, scale))
    return worst


def _integer_distance(d: np.ndarray) -> float:
    """Smallest distance from a sampling position to the integer lattice,
    where bilinear interpolation (and border clamping) has kinks."""
    _, h, w = d.shape
    pos = d + np.mgrid[0:h, 0:w]
    near = (pos > -1) & (pos[0:1] < h) & (pos[1:2] < w)
    return float(np.abs(pos - np.round(pos))[near].min(initial=1.0))


def param_rel_error(rng: np.random.Generator, size: int = 16, n_coords: int = 20,
                    eps: float = FD_EPS, margin: float = 5e-4) -> float:
    """Gradient check of an MSE surrogate objective w.r.t. network weights.

    Instances with a pre-activation within ``margin`` of zero, or a predicted
    sampling position within ``margin`` of an integer, are redrawn: a step of
    ``eps`` could cross a kink there and spoil the finite difference.
    """
    cfg = losses.LossConfig("mse", lam=0.5)
    while True:
        net = regnet_init(Arch(widths=(4, 8)), int(rng.integers(2**31)))
        for p in net.params.values():
            p.grid.data = p.grid.data + rng.normal(0, 0.1, p.grid.shape)
        i_f, i_m = rng.random((size, size)), rng.random((size, size))
        pre: list = []
        d = regnet_forward(net, i_f, i_m, pre)
        if (_integer_distance(d.data) >= margin
                and min(float(np.abs(a).min()) for a in pre) >= margin):
            break

    def loss():
        return losses.surrogate_objective(i_f, i_m, regnet_forward(net, i_f, i_m), cfg)

    with Tape() as tape:
        tape.backward(loss())
    names = sorted(net.params)
    scale = max(float(np.abs(tape.grad(p.grid)).max()) for p in net.params.values())
    worst = 0.0
    for _ in range(n_coords):
        p = net.params[names[int(rng.integers(len(names)))]]
        idx = tuple(int(rng.integers(s)) for s in p.grid.shape)
        g = tape.grad(p.grid)[idx]
        orig = p.grid.data[idx]
        p.grid.data[idx] = orig + eps
        up = loss().item()
        p.grid.data[idx] = orig - eps
        down = loss().item()
        p.grid.data[idx] = orig
        worst = max(worst, rel_error(g, (up - down) / (2 * eps), scale))
    return worst


def gradient_cases(rng: np.random.Generator, size: int = 16) -> dict[str, Callable[[], float]]:
    """One check per differentiable objective; each call draws a fresh instance."""
    shape = (1, size, size)

    def image_case(loss_fn):
        def run():
            a, b = rng.random(shape), rng.random(shape)
            return max_rel_error(lambda x: loss_fn(x, b), a, rng)
        return run

    def dice_case():
        k = 3
        p = rng.random((k, size, size)) + 0.1
        q = rng.random((k, size, size)) + 0.1
        q /= q.sum(axis=0)
        return max_rel_error(lambda x: losses.soft_dice(x, q), p / p.sum(axis=0), rng)

    def warp_case():
        img, w = rng.random(shape), rng.random(shape)
        d0 = rng.uniform(-2.5, 2.5, (2, size, size))
        return max_rel_error(lambda d: gm.total(warp_image(img, d) * w), d0, rng)

    def warp_loss_case():
        a, b = rng.random(shape), rng.random(shape)
        d0 = rng.uniform(-2.5, 2.5, (2, size, size))
        cfg = losses.LossConfig("ncc", lam=1.0, ncc_window=5)
        return max_rel_error(lambda d: losses.surrogate_objective(a, b, d, cfg), d0, rng)

    return {
        "mse": image_case(losses.mse),
        "ncc": image_case(lambda x, b: losses.ncc(x, b, 5)),
        "mi": image_case(losses.mutual_information),
        "cr": image_case(losses.correlation_ratio),
        "soft_dice": dice_case,
        "diffusion": lambda: max_rel_error(losses.diffusion_reg,
                                           rng.uniform(-1, 1, (2, size, size)), rng),
        "warp_image": warp_case,
        "warp_objective": warp_loss_case,
        "regnet_forward": lambda: param_rel_error(rng, size),
    }


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def run_selftest(instances: int = 3, seed: int = 0) -> list[CheckResult]:
    """Gradient checks on a few random instances plus closed-form oracles."""
    from .metrics import hard_dice, ndv, wilcoxon_signed_rank

    rng = np.random.default_rng(seed)
    out = []
    for name, case in gradient_cases(rng).items():
        worst = max(case() for _ in range(instances))
        out.append(CheckResult(f"grad:{name}", bool(worst <= REL_TOL),
                               f"max rel err {worst:.2e}"))

    _, p = wilcoxon_signed_rank(np.arange(1.0, 6.0), np.zeros(5))
    out.append(CheckResult("wilcoxon n=5", p == 0.0625, f"p={p}"))

    xx = np.arange(8.0)[None, :].repeat(8, axis=0)
    refl = np.stack([np.zeros((8, 8)), (7 - xx) - xx])
    v = ndv(refl)
    out.append(CheckResult("ndv reflection", abs(v - 100.0) < 1e-12, f"ndv={v}"))

    a = np.zeros((6, 6), dtype=int)
    b = np.zeros((6, 6), dtype=int)
    a[0:3, 0:3] = 1
    b[0:3, 2:5] = 1
    dsc = hard_dice(a, b, [1])[1]
    out.append(CheckResult("dice strip", abs(dsc - 1 / 3) < 1e-15, f"dsc={dsc}"))
    return out
