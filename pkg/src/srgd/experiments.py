"""Protocols for the three experiments: bias robustness, mask agnosticism and
multi-modal registration.

Each experiment fixes a phantom family, a set of training settings (input
policy + surrogate mode + loss) and a set of evaluation conditions. Runs are
keyed by ``(setting, seed)`` and write to their own files, so they can be
distributed over worker processes without contention.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io
from .losses import LossConfig
from .metrics import REPORT_COLUMNS, MetricReport
from .model import Arch, RegNet, regnet_init
from .synth import PhantomSpec, make_pair, make_phantom, random_deformation
from .trainer import Pair, SurrogateMode, TrainConfig, evaluate_pair, input_policy_apply, train

logger = logging.getLogger(__name__)

EXPERIMENTS = ("artifact", "mask", "multimodal")
HISTORY_COLUMNS = ("step", "train_loss", "val_metric")
SPLITS = ("train", "val", "test")
# sample seeds of the three splits live in disjoint blocks
_SPLIT_OFFSET = {"train": 0, "val": 100_000, "test": 200_000}


@dataclass(frozen=True)
class Setting:
    """One training recipe: what the network sees and what the loss sees."""

    name: str
    input_policy: str
    surrogate: str
    loss: LossConfig


@dataclass(frozen=True)
class Protocol:
    artifact: str
    phantom: dict
    settings: tuple[Setting, ...]
    eval_settings: tuple[str, ...]
    val_metric: str


_LUNG = dict(n_bodies=2, clutter=0.4, intensity_table=(0.5, 0.15, 0.6, 0.8))
_MASK_LOSS = LossConfig("ncc", lam=1.0, tre_weight=0.1)

PROTOCOLS: dict[str, Protocol] = {
    "artifact": Protocol(
        artifact="bias",
        phantom={},
        settings=(
            Setting("w_ic", "clean", "identity", LossConfig("mse", lam=0.1)),
            Setting("wo_ic", "raw", "identity", LossConfig("mse", lam=0.1)),
            Setting("ours", "raw", "bias_corrected", LossConfig("mse", lam=0.1)),
        ),
        eval_settings=("bias0", "bias1", "bias2", "bias3"),
        val_metric="dsc",
    ),
    "mask": Protocol(
        artifact="mask",
        phantom=_LUNG,
        settings=(
            Setting("masked", "clean", "identity", _MASK_LOSS),
            Setting("unmasked", "raw", "identity", _MASK_LOSS),
            Setting("random", "random_mix", "identity", _MASK_LOSS),
            Setting("ours", "independent_mix", "masked", _MASK_LOSS),
        ),
        eval_settings=("masked", "unmasked", "mixed"),
        val_metric="tre",
    ),
    "multimodal": Protocol(
        artifact="modality",
        phantom={},
        settings=(
            # lambda per setting picked by validation DSC over {0.5, 1, 2, 5, 10}
            Setting("ncc", "raw", "identity", LossConfig("ncc", lam=0.5)),
            Setting("cr", "raw", "identity", LossConfig("cr", lam=0.5)),
            Setting("mi", "raw", "identity", LossConfig("mi", lam=1.0)),
            Setting("ours", "raw", "paired_modality", LossConfig("ncc", lam=0.5)),
        ),
        eval_settings=("standard",),
        val_metric="dsc",
    ),
}


def _tuple(kind):
    def parse(text: str):
        return tuple(kind(t.strip()) for t in text.split(",") if t.strip())
    return parse


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "artifact"
    n_train: int = 40
    n_val: int = 8
    n_test: int = 16
    size: int = 64
    data_seed: int = 0
    deform_amplitude: float = 4.0
    deform_sigma: float = 8.0
    settings: tuple[str, ...] = ()
    eval_settings: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2)
    lr: float = 1e-3
    max_steps: int = 1500
    patience_steps: int = 500
    val_every: int = 50
    train_bias_scale: float = 1.0

    def __post_init__(self):
        if self.experiment not in PROTOCOLS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        proto = PROTOCOLS[self.experiment]
        known = [s.name for s in proto.settings]
        if not self.settings:
            object.__setattr__(self, "settings", tuple(known))
        if not self.eval_settings:
            object.__setattr__(self, "eval_settings", proto.eval_settings)
        bad = [s for s in self.settings if s not in known]
        if bad:
            raise ValueError(f"unknown settings {bad} for {self.experiment}; choose from {known}")
        bad = [e for e in self.eval_settings if e not in proto.eval_settings]
        if bad:
            raise ValueError(f"unknown eval settings {bad}; choose from {proto.eval_settings}")
        if len(set(self.seeds)) < 2:
            raise ValueError("need at least two distinct seeds for significance testing")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one pair")

    @property
    def protocol(self) -> Protocol:
        return PROTOCOLS[self.experiment]

    def setting(self, name: str) -> Setting:
        return next(s for s in self.protocol.settings if s.name == name)

    def as_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ", ".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out


_PARSERS = {
    "settings": _tuple(str), "eval_settings": _tuple(str), "seeds": _tuple(int),
}


def config_from_items(items: Mapping[str, str], base: ExperimentConfig | None = None
                      ) -> ExperimentConfig:
    """Build a config from ``key = value`` strings layered over ``base``."""
    keys = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for k, v in items.items():
        if k not in keys:
            raise ValueError(f"unknown config key {k!r}")
        if k in _PARSERS:
            values[k] = _PARSERS[k](v)
        else:
            default = getattr(ExperimentConfig(), k)
            values[k] = type(default)(v)
    if base is None:
        return ExperimentConfig(**values)
    if "experiment" in values and values["experiment"] != base.experiment:
        values.setdefault("settings", ())
        values.setdefault("eval_settings", ())
    return replace(base, **values)


# ---------------------------------------------------------------- datasets

def _pair_for(cfg: ExperimentConfig, split: str, index: int) -> Pair:
    seed = cfg.data_seed * 1_000_000 + _SPLIT_OFFSET[split] + index
    spec = PhantomSpec(size=(cfg.size, cfg.size), seed=seed, **cfg.protocol.phantom)
    sample = make_phantom(spec)
    deform = random_deformation(seed, cfg.deform_amplitude, cfg.deform_sigma, spec.size)
    return make_pair(sample, deform, np.random.default_rng([seed, 7]))


def split_sizes(cfg: ExperimentConfig) -> dict[str, int]:
    return {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}


def split_seeds(cfg: ExperimentConfig) -> dict[str, list[int]]:
    base = cfg.data_seed * 1_000_000
    return {s: [base + _SPLIT_OFFSET[s] + i for i in range(n)]
            for s, n in split_sizes(cfg).items()}


def build_dataset(cfg: ExperimentConfig, workers: int = 1) -> dict[str, list[Pair]]:
    jobs = [(split, i) for split, n in split_sizes(cfg).items() for i in range(n)]
    pairs = _map(_pair_job, [(cfg, s, i) for s, i in jobs], workers)
    out: dict[str, list[Pair]] = {s: [] for s in SPLITS}
    for (split, _), pair in zip(jobs, pairs):
        out[split].append(pair)
    return out


def _pair_job(args) -> Pair:
    return _pair_for(*args)


def write_dataset(root, cfg: ExperimentConfig, data: dict[str, list[Pair]]) -> None:
    root = Path(root)
    for split, pairs in data.items():
        for i, (fixed, moving) in enumerate(pairs):
            d = root / split / f"{i:03d}"
            io.save_sample(d / "fixed", fixed)
            io.save_sample(d / "moving", moving)
    items = cfg.as_items()
    for split, seeds in split_seeds(cfg).items():
        items[f"{split}_seeds"] = f"{seeds[0]}..{seeds[-1]}"
    io.write_manifest(root / "manifest.txt", items)


def read_dataset(root) -> tuple[ExperimentConfig, dict[str, list[Pair]]]:
    root = Path(root)
    meta = io.read_manifest(root / "manifest.txt")
    keys = {f.name for f in fields(ExperimentConfig)}
    cfg = config_from_items({k: v for k, v in meta.items() if k in keys})
    data = {}
    for split in SPLITS:
        dirs = sorted(p for p in (root / split).iterdir() if p.is_dir())
        data[split] = [(io.load_sample(d / "fixed"), io.load_sample(d / "moving")) for d in dirs]
    return cfg, data


# ------------------------------------------------------------------ runs

def train_config(cfg: ExperimentConfig, setting: Setting, seed: int) -> TrainConfig:
    return TrainConfig(
        loss=setting.loss, lr=cfg.lr, max_steps=cfg.max_steps,
        patience_steps=min(cfg.patience_steps, cfg.max_steps), val_every=cfg.val_every,
        seed=seed, input_policy=setting.input_policy, artifact=cfg.protocol.artifact,
        bias_scale=cfg.train_bias_scale, val_metric=cfg.protocol.val_metric,
    )


def run_name(setting: str, seed: int) -> str:
    return f"{setting}_seed{seed}"


def train_one(cfg: ExperimentConfig, data, setting_name: str, seed: int, out_dir) -> RegNet:
    setting = cfg.setting(setting_name)
    net = regnet_init(Arch(), seed)
    net, hist = train(net, data, SurrogateMode(setting.surrogate), train_config(cfg, setting, seed))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = run_name(setting_name, seed)
    io.save_checkpoint(out_dir / f"{name}.ckpt", net)
    io.write_csv(out_dir / f"{name}_history.csv", HISTORY_COLUMNS,
                 ({"step": s, "train_loss": repr(l), "val_metric": repr(v)}
                  for s, l, v in hist.rows()))
    logger.info("trained %s (best step %d, val %s %.4f)", name, hist.best_step,
                cfg.protocol.val_metric, hist.best_metric)
    return net


def eval_inputs(cfg: ExperimentConfig, eval_setting: str, fixed, moving):
    artifact = cfg.protocol.artifact
    if cfg.experiment == "artifact":
        scale = float(eval_setting.removeprefix("bias"))
        return fixed.biased(scale), moving.biased(scale)
    if cfg.experiment == "mask":
        policy = {"masked": "clean", "unmasked": "raw", "mixed": "mixed_pair"}[eval_setting]
        return input_policy_apply(policy, fixed, moving, None, artifact)
    return input_policy_apply("raw", fixed, moving, None, artifact)


def evaluate(cfg: ExperimentConfig, net: RegNet, test: Sequence[Pair], setting: str, seed: int,
             eval_setting: str) -> list[dict[str, str]]:
    rows = []
    for i, (fixed, moving) in enumerate(test):
        res = evaluate_pair(net, fixed, moving, eval_inputs(cfg, eval_setting, fixed, moving))
        report = MetricReport(
            sample_id=f"{i:03d}", dsc_per_label=res["dsc_per_label"], mean_dsc=res["dsc"],
            tre_mean=res["tre_mean"], tre_std=res["tre_std"], ndv_percent=res["ndv"],
        )
        rows.append(report.row(setting, seed, eval_setting))
    return rows


def eval_one(cfg: ExperimentConfig, net: RegNet, test, setting: str, seed: int, out_dir) -> Path:
    rows = []
    for ev in cfg.eval_settings:
        rows += evaluate(cfg, net, test, setting, seed, ev)
    path = Path(out_dir) / f"{run_name(setting, seed)}_eval.csv"
    io.write_csv(path, REPORT_COLUMNS, rows)
    return path


def _run_job(args) -> Path:
    cfg, data, setting, seed, out_dir = args
    net = train_one(cfg, data, setting, seed, out_dir)
    return eval_one(cfg, net, data["test"], setting, seed, out_dir)


def run_experiment(cfg: ExperimentConfig, data, out_dir, workers: int = 1) -> list[Path]:
    """Train and evaluate every ``(setting, seed)`` run; returns the eval CSVs."""
    jobs = [(cfg, data, s, seed, out_dir) for s in cfg.settings for seed in cfg.seeds]
    return _map(_run_job, jobs, workers)


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def default_workers() -> int:
    env = os.environ.get("SRGD_WORKERS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ValueError(f"SRGD_WORKERS must be an integer, got {env!r}") from None
