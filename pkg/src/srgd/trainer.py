"""Surrogate-supervised training.

The network always sees the input pair chosen by the input policy, while the
loss is computed on the surrogate pair chosen by the surrogate mode. With the
``identity`` mode the two coincide and training reduces to the usual
self-supervised objective.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gridmath as gm
from .gridmath import Tape
from .losses import LossConfig, surrogate_objective
from .metrics import hard_dice, mean_dice, tre
from .model import RegNet, regnet_forward
from .synth import Sample
from .warp import warp_labels

logger = logging.getLogger(__name__)

MODES = ("identity", "bias_corrected", "masked", "paired_modality", "label_maps")
POLICIES = ("raw", "clean", "random_mix", "independent_mix", "mixed_pair")
ARTIFACTS = ("bias", "mask", "modality")

Pair = tuple[Sample, Sample]


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SurrogateMode:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown surrogate mode {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    max_steps: int = 5000
    patience_steps: int = 500
    val_every: int = 50
    seed: int = 0
    input_policy: str = "raw"
    artifact: str = "bias"
    bias_scale: float = 1.0
    val_metric: str = "dsc"

    def __post_init__(self):
        if self.input_policy not in POLICIES:
            raise ValueError(f"unknown input policy {self.input_policy!r}")
        if self.artifact not in ARTIFACTS:
            raise ValueError(f"unknown artifact kind {self.artifact!r}")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        if self.patience_steps > self.max_steps:
            raise ValueError("patience_steps must not exceed max_steps")
        if self.val_metric not in ("dsc", "tre"):
            raise ValueError("val_metric must be 'dsc' or 'tre'")


def _raw(sample: Sample, artifact: str, bias_scale: float, moving: bool) -> np.ndarray:
    if artifact == "bias":
        return sample.biased(bias_scale)
    if artifact == "modality":
        return sample.modality_b if moving else sample.img
    return sample.img


def _clean(sample: Sample, artifact: str) -> np.ndarray:
    return sample.masked() if artifact == "mask" else sample.img


def input_policy_apply(policy: str, fixed: Sample, moving: Sample,
                       rng: np.random.Generator | None = None, artifact: str = "bias",
                       bias_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Choose the network inputs for one pair.

    ``raw`` gives artifact-affected (biased / unmasked / other-modality)
    images, ``clean`` the corrected or masked ones, ``random_mix`` one of the
    two for both images by a single coin flip, ``independent_mix`` one coin
    flip per image, and ``mixed_pair`` a clean fixed with a raw moving image.
    """
    if policy == "independent_mix":
        if rng is None:
            raise ValueError("independent_mix needs an rng")
        clean_f, clean_m = rng.random(2) < 0.5
        return (_clean(fixed, artifact) if clean_f else _raw(fixed, artifact, bias_scale, False),
                _clean(moving, artifact) if clean_m else _raw(moving, artifact, bias_scale, True))
    if policy == "random_mix":
        if rng is None:
            raise ValueError("random_mix needs an rng")
        policy = "clean" if rng.random() < 0.5 else "raw"
    if policy == "raw":
        return (_raw(fixed, artifact, bias_scale, False),
                _raw(moving, artifact, bias_scale, True))
    if policy == "clean":
        return _clean(fixed, artifact), _clean(moving, artifact)
    if policy == "mixed_pair":
        return _clean(fixed, artifact), _raw(moving, artifact, bias_scale, True)
    raise ValueError(f"unknown input policy {policy!r}")


def build_surrogates(mode: SurrogateMode, fixed: Sample, moving: Sample,
                     inputs: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    kind = mode.kind
    if kind == "identity":
        return inputs
    if kind == "bias_corrected":
        return fixed.img, moving.img
    if kind == "masked":
        if fixed.mask is None or moving.mask is None:
            raise ValueError("masked surrogates need ROI masks")
        return fixed.img * fixed.mask, moving.img * moving.mask
    if kind == "paired_modality":
        # the moving subject's image in the fixed image's modality
        return fixed.img, moving.img
    if fixed.onehot is None or moving.onehot is None:
        raise ValueError("label-map surrogates need one-hot labels")
    return fixed.onehot, moving.onehot


def pair_landmarks(fixed: Sample, moving: Sample):
    return fixed.landmarks.points, moving.landmarks.points


def evaluate_pair(net: RegNet, fixed: Sample, moving: Sample, inputs) -> dict[str, float]:
    """Forward one pair (no tape) and score DSC and TRE."""
    from .metrics import ndv

    d = regnet_forward(net, *inputs)
    warped = warp_labels(moving.labels, d)
    dsc = hard_dice(warped, fixed.labels, range(1, fixed.n_labels))
    t_mean, t_std = tre(fixed.landmarks, moving.landmarks, d)
    return {"dsc": mean_dice(dsc), "dsc_per_label": dsc, "tre_mean": t_mean,
            "tre_std": t_std, "ndv": ndv(d), "disp": d}


def validate(net: RegNet, pairs: Sequence[Pair], cfg: TrainConfig) -> float:
    rng = np.random.default_rng([cfg.seed, 1])
    scores = []
    for fixed, moving in pairs:
        inputs = input_policy_apply(cfg.input_policy, fixed, moving, rng, cfg.artifact,
                                    cfg.bias_scale)
        res = evaluate_pair(net, fixed, moving, inputs)
        scores.append(res["dsc"] if cfg.val_metric == "dsc" else res["tre_mean"])
    return float(np.mean(scores))


def _better(new: float, best: float, metric: str) -> bool:
    return new > best if metric == "dsc" else new < best


def train_step(net: RegNet, fixed: Sample, moving: Sample, mode: SurrogateMode,
               cfg: TrainConfig, rng: np.random.Generator) -> float:
    inputs = input_policy_apply(cfg.input_policy, fixed, moving, rng, cfg.artifact,
                                cfg.bias_scale)
    s_f, s_m = build_surrogates(mode, fixed, moving, inputs)
    with Tape() as tape:
        d = regnet_forward(net, *inputs)
        if not np.all(np.isfinite(d.data)):
            return float("nan")
        loss = surrogate_objective(s_f, s_m, d, cfg.loss, pair_landmarks(fixed, moving))
        value = loss.item()
        if not math.isfinite(value):
            return value
        tape.backward(loss)
    for p in net.params.values():
        gm.adam_update(p, tape.grad(p.grid), lr=cfg.lr)
    return value


@dataclass
class History:
    steps: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    best_step: int = 0
    best_metric: float = float("nan")

    def rows(self):
        return zip(self.steps, self.train_loss, self.val_metric)


def train(net: RegNet, dataset: dict[str, Sequence[Pair]], mode: SurrogateMode,
          cfg: TrainConfig) -> tuple[RegNet, History]:
    """Train ``net`` in place and return it restored to its best checkpoint.

    Validation runs at step 0 and every ``val_every`` steps; training stops at
    ``max_steps`` or once ``patience_steps`` pass without improvement.
    """
    train_pairs = dataset["train"]
    val_pairs = dataset["val"]
    if not train_pairs or not val_pairs:
        raise ValueError("dataset needs non-empty train and val splits")
    rng = np.random.default_rng(cfg.seed)
    hist = History()
    best = validate(net, val_pairs, cfg)
    best_state = {k: p.grid.data.copy() for k, p in net.params.items()}
    hist.steps.append(0)
    hist.train_loss.append(float("nan"))
    hist.val_metric.append(best)
    hist.best_metric = best
    running = []
    for step in range(1, cfg.max_steps + 1):
        idx = int(rng.integers(len(train_pairs)))
        fixed, moving = train_pairs[idx]
        value = train_step(net, fixed, moving, mode, cfg, rng)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}, pair {idx}, mode {mode.kind}")
        running.append(value)
        if step % cfg.val_every == 0:
            metric = validate(net, val_pairs, cfg)
            hist.steps.append(step)
            hist.train_loss.append(float(np.mean(running)))
            hist.val_metric.append(metric)
            running = []
            if _better(metric, best, cfg.val_metric):
                best = metric
                best_state = {k: p.grid.data.copy() for k, p in net.params.items()}
                hist.best_step = step
                hist.best_metric = metric
            logger.debug("step %d loss %.5f val %.4f", step, hist.train_loss[-1], metric)
        if step - hist.best_step >= cfg.patience_steps:
            logger.info("early stop at step %d (best %d)", step, hist.best_step)
            break
    for k, p in net.params.items():
        p.grid.data = best_state[k]
    return net, hist
