"""Displacement predictors: a small conv encoder-decoder and a per-pair field."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import gridmath as gm
from .gridmath import Grid, Param, Tape, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arch:
    widths: tuple[int, ...] = (16, 32)
    kernel: int = 3
    slope: float = gm.DEFAULT_LEAKY_SLOPE

    @property
    def levels(self) -> int:
        return len(self.widths)


@dataclass
class RegNet:
    """U-Net style displacement network.

    Layout for widths ``(w1, ..., wL)``: a full-resolution stem with ``w1``
    channels, ``L`` stride-2 convolutions (level ``l`` has ``wl`` channels), a
    bottleneck, then ``L`` upsample + skip-concat + conv stages and a zero
    initialized 2-channel head.
    """

    arch: Arch
    seed: int
    params: dict[str, Param] = field(default_factory=dict)

    def n_params(self) -> int:
        return sum(p.grid.data.size for p in self.params.values())

    def layer_specs(self) -> list[tuple[str, int, int]]:
        w = self.arch.widths
        specs = [("stem", 2, w[0])]
        prev = w[0]
        for lvl, width in enumerate(w, start=1):
            specs.append((f"down{lvl}", prev, width))
            prev = width
        specs.append(("bottleneck", prev, prev))
        skips = [w[0]] + list(w[:-1])
        for lvl in range(len(w), 0, -1):
            out = w[max(lvl - 2, 0)]
            specs.append((f"up{lvl}", prev + skips[lvl - 1], out))
            prev = out
        specs.append(("head", prev, 2))
        return specs


def regnet_init(arch: Arch = Arch(), seed: int = 0) -> RegNet:
    """He-initialized network whose head starts at zero (identity output)."""
    if arch.levels < 1 or any(c < 1 for c in arch.widths):
        raise ValueError(f"invalid architecture {arch}")
    if arch.kernel % 2 == 0:
        raise ValueError("kernel size must be odd")
    net = RegNet(arch=arch, seed=seed)
    rng = np.random.default_rng(seed)
    k = arch.kernel
    for name, cin, cout in net.layer_specs():
        if name == "head":
            w = np.zeros((cout, cin, k, k))
        else:
            std = math.sqrt(2.0 / ((1 + arch.slope ** 2) * cin * k * k))
            w = rng.normal(0.0, std, (cout, cin, k, k))
        net.params[name + ".w"] = Param(w)
        net.params[name + ".b"] = Param(np.zeros(cout))
    return net


def normalize_input(img: np.ndarray) -> np.ndarray:
    """Divide by the 99th percentile so bias-scaled inputs stay in range."""
    img = np.asarray(img, dtype=np.float64)
    scale = float(np.percentile(img, 99))
    if scale <= 0:
        scale = float(img.max()) or 1.0
    return img / scale


def _conv(net: RegNet, name: str, x: Grid, stride: int = 1, act: bool = True,
          preacts: list | None = None) -> Grid:
    y = gm.conv2d(x, net.params[name + ".w"], net.params[name + ".b"], stride=stride)
    if not act:
        return y
    if preacts is not None:
        preacts.append(y.data)
    return gm.leaky_relu(y, net.arch.slope)


def regnet_forward(net: RegNet, i_f, i_m, preacts: list | None = None) -> Grid:
    """Predict the ``(2, H, W)`` displacement aligning ``i_m`` to ``i_f``.

    If ``preacts`` is a list, every pre-activation array is appended to it
    (gradient checks use this to stay clear of the activation kink).
    """
    f = np.asarray(i_f.data if isinstance(i_f, Grid) else i_f, dtype=np.float64)
    m = np.asarray(i_m.data if isinstance(i_m, Grid) else i_m, dtype=np.float64)
    f, m = f.reshape(f.shape[-2:]), m.reshape(m.shape[-2:])
    if f.shape != m.shape:
        raise ShapeError(f"input shapes differ: {f.shape} vs {m.shape}")
    h, w = f.shape
    if h % (2 ** net.arch.levels) or w % (2 ** net.arch.levels):
        raise ShapeError(f"size {h}x{w} must be divisible by {2 ** net.arch.levels}")
    x = Grid(np.stack([normalize_input(f), normalize_input(m)]))
    skips = [_conv(net, "stem", x, preacts=preacts)]
    for lvl in range(1, net.arch.levels + 1):
        skips.append(_conv(net, f"down{lvl}", skips[-1], stride=2, preacts=preacts))
    y = _conv(net, "bottleneck", skips.pop(), preacts=preacts)
    for lvl in range(net.arch.levels, 0, -1):
        y = gm.concat([gm.upsample2x(y), skips.pop()])
        y = _conv(net, f"up{lvl}", y, preacts=preacts)
    return _conv(net, "head", y, act=False)


@dataclass
class FieldModel:
    disp: Param

    @classmethod
    def zeros(cls, h: int, w: int) -> "FieldModel":
        return cls(Param(np.zeros((2, h, w))))


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"loss became non-finite at step {step}{detail}")
        self.step = step


def field_optimize(i_f, i_m, s_f, s_m, cfg, steps: int = 300, lr: float = 0.05,
                   landmarks=None) -> tuple[Grid, list[float]]:
    """Register one pair by optimizing its displacement field directly.

    The displacement is driven only by the surrogate objective on
    ``(s_f, s_m)``; ``i_f`` and ``i_m`` fix the grid size. Returns the final
    displacement and the per-step loss trace.
    """
    from .losses import surrogate_objective

    f = np.asarray(getattr(i_f, "data", i_f))
    m = np.asarray(getattr(i_m, "data", i_m))
    if f.shape[-2:] != m.shape[-2:]:
        raise ShapeError("fixed and moving sizes differ")
    h, w = f.shape[-2:]
    model = FieldModel.zeros(h, w)
    trace: list[float] = []
    for step in range(steps):
        with Tape() as tape:
            loss = surrogate_objective(s_f, s_m, model.disp.grid, cfg, landmarks)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step)
            tape.backward(loss)
        trace.append(value)
        gm.adam_update(model.disp, tape.grad(model.disp.grid), lr=lr)
    return Grid(model.disp.data.copy()), trace
