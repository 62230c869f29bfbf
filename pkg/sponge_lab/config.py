"""
Configuration models for sponge-lab.

All knobs of the attack, the trainer, the model zoo and the battery simulator
live here as pydantic models so that the CLI, the YAML config file and the MCP
service validate values the same way.
"""

import logging
from enum import StrEnum
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

logger = logging.getLogger(__name__)

# config keys whose argparse destination differs from the flag name
KEY_ALIASES = {"lambda": "lam", "poison_frac": "poison_fraction"}


class RecordMode(StrEnum):
    """Which layer outputs feed the energy objective."""

    ALL = "all"
    RELU = "relu"


class EnergyScale(StrEnum):
    """What the sponge step divides the raw energy sum by before differentiating."""

    ELEMENT = "element"
    SAMPLE = "sample"


class SpongeParams(BaseModel):
    """The attack triple: smoothness, strength and poisoned share of the data."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    sigma: float = Field(1e-6, gt=0)
    lam: float = Field(20.0, ge=0, alias="lambda")
    poison_fraction: float = Field(0.25, ge=0, le=1)


class TrainConfig(BaseModel):
    """Trainer settings: the step size, epoch count and batching of plain SGD."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(0.05, gt=0)
    epochs: int = Field(15, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    sponge: SpongeParams = SpongeParams()
    record: RecordMode = RecordMode.ALL
    energy_scale: EnergyScale = EnergyScale.ELEMENT
    # per-entry bound on the λ∇E step; None leaves it unbounded
    energy_clip: float | None = Field(1.0, gt=0)

    def with_sponge(self, **changes: float) -> "TrainConfig":
        """Return a copy with some attack parameters replaced."""
        sponge = validated(SpongeParams, **{**self.sponge.model_dump(), **changes})
        return self.model_copy(update={"sponge": sponge})


class ModelConfig(BaseModel):
    """Architecture scale and initialization seed for the toy mobile net."""

    model_config = ConfigDict(frozen=True)

    width_multiplier: float = Field(1.0, gt=0)
    seed: int = 0


class BatteryModel(BaseModel):
    """Affine joules-per-MAC battery used by the streaming simulation.

    Defaults follow a 4600 mAh phone battery at a 4.2 V nominal reading;
    joules_per_mac is a calibration knob, not a hardware measurement.
    """

    model_config = ConfigDict(frozen=True)

    capacity_mah: float = Field(4600.0, gt=0)
    nominal_voltage_mv: float = Field(4200.0, gt=0)
    joules_per_mac: float = Field(1e-9, ge=0)
    per_inference_overhead_joules: float = Field(0.0, ge=0)
    seconds_per_inference: float = Field(0.01, gt=0)

    @property
    def capacity_joules(self) -> float:
        # 1 mAh at 1 mV is 3.6e-3 J
        return self.capacity_mah * self.nominal_voltage_mv * 3.6e-3


def validated[M: BaseModel](model_cls: type[M], **values: Any) -> M:
    """Build a config model, turning pydantic validation failures into ConfigError."""
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"invalid {model_cls.__name__}: {e}") from e


def load_config_file(path: str | Path) -> dict[str, Any]:
    """
    Read a YAML config file whose keys are CLI flag names.

    Keys may use dashes or underscores; ``lambda`` is accepted for the attack
    strength and ``poison-frac`` for the poison fraction.

    Returns:
        Mapping of argparse destination names to values
    """
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e

    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping")

    values: dict[str, Any] = {}
    for key, value in raw.items():
        dest = str(key).replace("-", "_")
        values[KEY_ALIASES.get(dest, dest)] = value
    logger.debug("Loaded %d settings from %s", len(values), path)
    return values
