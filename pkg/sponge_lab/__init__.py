"""sponge-lab - sponge poisoning training and a zero-skipping accelerator energy simulator."""

from .config import BatteryModel, ModelConfig, RecordMode, SpongeParams, TrainConfig
from .data import Dataset, load_cifar10, load_idx, synth_dataset
from .energy import EnergyReport, SkipRule, energy_gap, energy_report
from .errors import SpongeError
from .experiments import SweepAxis, SweepReport, SweepSpec, run_sweep, simulate_streaming
from .models import Model, build_toy_mobile_net, load_checkpoint, save_checkpoint
from .server import SpongeLabMCP
from .trainer import clean_update, sponge_update, train, validate

__version__ = "0.1.0"

__all__ = [
    "BatteryModel",
    "Dataset",
    "EnergyReport",
    "Model",
    "ModelConfig",
    "RecordMode",
    "SkipRule",
    "SpongeError",
    "SpongeLabMCP",
    "SpongeParams",
    "SweepAxis",
    "SweepReport",
    "SweepSpec",
    "TrainConfig",
    "build_toy_mobile_net",
    "clean_update",
    "energy_gap",
    "energy_report",
    "load_checkpoint",
    "load_cifar10",
    "load_idx",
    "run_sweep",
    "save_checkpoint",
    "simulate_streaming",
    "sponge_update",
    "synth_dataset",
    "train",
    "validate",
]
