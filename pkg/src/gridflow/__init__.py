"""Physics-guided diffusion sampling of AC power-flow operating points."""

from .acpf import PowerFlowRecord, newton_solve
from .datagen import Dataset, NormStats, generate_dataset
from .diffusion import DecoupledModel, GuidanceConfig, TrainConfig, sample_guided, sample_unguided, train_decoupled
from .grid import GridCase, load_case, parse_case

__all__ = [
    "GridCase",
    "load_case",
    "parse_case",
    "PowerFlowRecord",
    "newton_solve",
    "Dataset",
    "NormStats",
    "generate_dataset",
    "DecoupledModel",
    "GuidanceConfig",
    "TrainConfig",
    "train_decoupled",
    "sample_unguided",
    "sample_guided",
]

__version__ = "0.1.0"
