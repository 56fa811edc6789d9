"""Deformable registration with surrogate supervision on synthetic 2D data."""

from .gridmath import Grid, Param, Tape, adam_update, backward
from .losses import LossConfig, objective, surrogate_objective
from .metrics import hard_dice, ndv, tre, wilcoxon_signed_rank
from .model import Arch, RegNet, regnet_forward, regnet_init
from .trainer import SurrogateMode, TrainConfig, build_surrogates, train
from .warp import warp_image

__version__ = "0.1.0"
