"""Few-step distillation of equivariant point-cloud diffusion models."""

from .distill import DivergenceSpec, dmd_step, fdiv_weight, ratio_from_disc
from .egnn import EpsNet, NetSpec, init_params
from .geom import Batch, NoiseStream, PointSet, Rotation
from .schedule import BaseSchedule, NoiseGrid, edm_sigmas, make_grid, respace, uniform_grid
from .trainer import TrainConfig, distill, evaluate, train_teacher

__version__ = "0.1.0"

__all__ = [
    "BaseSchedule", "Batch", "DivergenceSpec", "EpsNet", "NetSpec", "NoiseGrid", "NoiseStream", "PointSet",
    "Rotation", "TrainConfig", "distill", "dmd_step", "edm_sigmas", "evaluate", "fdiv_weight", "init_params",
    "make_grid", "ratio_from_disc", "respace", "train_teacher", "uniform_grid",
]
