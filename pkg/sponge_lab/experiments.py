"""
Experiment harness: hyperparameter sweeps, the streaming battery-drain
simulation and report files.

A sweep trains one model per grid point along a single attack axis (σ, λ or
the poison fraction) and measures the energy ratio and the validation
accuracy, next to an unattacked (λ = 0) baseline. The streaming simulation
replays continuous inference over a validation set on a simulated battery.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from enum import StrEnum
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import BatteryModel, ModelConfig, TrainConfig
from .data import Dataset
from .energy import EnergyReport, SkipRule, energy_report
from .errors import DatasetFormatError, ReportWriteError, SpongeError
from .models import Model, build_toy_mobile_net
from .trainer import TrainHistory, relu_density, train, validate

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "axis_value",
    "energy_ratio",
    "val_accuracy",
    "mean_density",
    "task_loss",
    "error",
]


class SweepAxis(StrEnum):
    SIGMA = "sigma"
    LAMBDA = "lambda"
    POISON_FRACTION = "poison_fraction"

    @property
    def field(self) -> str:
        """SpongeParams field the axis varies."""
        return {"sigma": "sigma", "lambda": "lam", "poison_fraction": "poison_fraction"}[
            self.value
        ]


class SweepSpec(BaseModel):
    """One axis, its grid, and the fixed settings every grid point shares."""

    model_config = ConfigDict(frozen=True)

    axis: SweepAxis
    grid: list[float] = Field(min_length=1)
    base: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    skip_rule: SkipRule = SkipRule.SKIP_ON_ZERO_ACTIVATION
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_grid(self) -> "SweepSpec":
        for value in self.grid:
            match self.axis:
                case SweepAxis.SIGMA if not value > 0:
                    raise ValueError(f"sigma grid values must be positive, got {value}")
                case SweepAxis.LAMBDA if not value >= 0:
                    raise ValueError(f"lambda grid values must be non-negative, got {value}")
                case SweepAxis.POISON_FRACTION if not 0 <= value <= 1:
                    raise ValueError(f"poison fractions must lie in [0, 1], got {value}")
        return self

    def points(self) -> list[float]:
        """Sorted distinct grid values; a lambda sweep always includes 0."""
        values = set(self.grid)
        if self.axis == SweepAxis.LAMBDA:
            values.add(0.0)
        return sorted(values)

    def config_at(self, value: float) -> TrainConfig:
        return self.base.with_sponge(**{self.axis.field: value})

    def baseline_config(self) -> TrainConfig:
        return self.base.with_sponge(lam=0.0)


class SweepRow(BaseModel):
    axis_value: float
    energy_ratio: float | None = None
    val_accuracy: float | None = None
    mean_density: float | None = None
    task_loss: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class SweepReport(BaseModel):
    """Rows ordered by axis value plus the unattacked baseline."""

    axis: SweepAxis
    rows: list[SweepRow] = []
    baseline: SweepRow | None = None

    @property
    def failed(self) -> list[SweepRow]:
        return [row for row in self.rows if not row.ok]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=SWEEP_COLUMNS)

    def spearman(self) -> float:
        """
        Rank correlation of energy ratio against the axis over successful rows.

        0.0 when fewer than two rows succeeded or either column is constant.
        """
        frame = self.to_frame()
        frame = frame[frame["error"].isna()]
        # Pearson over average ranks
        ranks = frame[["axis_value", "energy_ratio"]].astype(float).rank()
        if len(ranks) < 2 or (ranks.nunique() < 2).any():
            return 0.0
        return float(ranks["axis_value"].corr(ranks["energy_ratio"]))

    def stealthy_rows(self, max_accuracy_drop: float) -> list[SweepRow]:
        """Successful rows whose accuracy stays within the drop of the baseline."""
        if self.baseline is None or self.baseline.val_accuracy is None:
            return []
        floor = self.baseline.val_accuracy - max_accuracy_drop
        return [
            row
            for row in self.rows
            if row.ok and row.val_accuracy is not None and row.val_accuracy >= floor
        ]

    def best(self, max_accuracy_drop: float = 0.05) -> SweepRow | None:
        """Highest energy ratio among stealthy rows; ties go to the lower axis value."""
        candidates = [
            row for row in self.stealthy_rows(max_accuracy_drop) if row.energy_ratio is not None
        ]
        if not candidates:
            return None
        return max(candidates, key=lambda row: (row.energy_ratio, -row.axis_value))


def evaluate_point(
    value: float,
    config: TrainConfig,
    model_config: ModelConfig,
    skip_rule: SkipRule,
    train_set: Dataset,
    val_set: Dataset,
) -> SweepRow:
    """Train one model and measure it; library failures become an error row."""
    sponge = config.sponge
    logger.info(
        "Grid point %g: lambda=%g sigma=%g P=%g",
        value,
        sponge.lam,
        sponge.sigma,
        sponge.poison_fraction,
    )
    try:
        model = build_toy_mobile_net(
            train_set.input_shape,
            train_set.num_classes,
            model_config.width_multiplier,
            model_config.seed,
        )
        model, history = train(model, train_set, val_set, config)
        report = energy_report(model, val_set.images, skip_rule)
        row = SweepRow(
            axis_value=value,
            energy_ratio=report.energy_ratio,
            val_accuracy=validate(model, val_set),
            mean_density=relu_density(model, val_set),
            task_loss=history.records[-1].task_loss,
        )
    except SpongeError as e:
        logger.warning("Grid point %g failed: %s", value, e)
        return SweepRow(axis_value=value, error=f"{type(e).__name__}: {e}")
    logger.info(
        "Grid point %g: energy_ratio=%.4f val_acc=%.4f",
        value,
        row.energy_ratio,
        row.val_accuracy,
    )
    return row


def run_sweep(sweep: SweepSpec, train_set: Dataset, val_set: Dataset) -> SweepReport:
    """
    Train and evaluate every grid point of a sweep.

    Grid points run in ``sweep.workers`` processes; rows come back ordered by
    axis value whatever the completion order. A failed point is kept as a row
    with its error string.
    """
    points = sweep.points()
    configs = [sweep.config_at(value) for value in points]
    needs_baseline = sweep.axis != SweepAxis.LAMBDA
    if needs_baseline:
        points.append(getattr(sweep.base.sponge, sweep.axis.field))
        configs.append(sweep.baseline_config())

    n = len(points)
    args = (
        points,
        configs,
        [sweep.model] * n,
        [sweep.skip_rule] * n,
        [train_set] * n,
        [val_set] * n,
    )
    if sweep.workers > 1:
        with ProcessPoolExecutor(max_workers=sweep.workers) as pool:
            results = list(pool.map(evaluate_point, *args))
    else:
        results = list(map(evaluate_point, *args))

    if needs_baseline:
        baseline = results.pop()
    else:
        baseline = next(row for row in results if row.axis_value == 0.0)
    report = SweepReport(axis=sweep.axis, rows=results, baseline=baseline)
    if report.failed:
        logger.warning("%d of %d grid points failed", len(report.failed), len(report.rows))
    return report


class DischargeRow(BaseModel):
    epoch: int
    executed_macs: int
    consumed_joules: float
    percent_drop: float
    cumulative_percent: float
    wall_seconds: float
    discharge_rate_per_hour: float


class DischargeReport(BaseModel):
    """Simulated battery drain of continuous inference, one row per epoch."""

    energy_ratio: float
    inferences_per_epoch: int
    rows: list[DischargeRow] = []
    exhausted_at_epoch: int | None = None

    @property
    def total_percent(self) -> float:
        return self.rows[-1].cumulative_percent if self.rows else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [row.model_dump() for row in self.rows], columns=list(DischargeRow.model_fields)
        )


def discharge_percent(executed_macs: int, inferences: int, battery: BatteryModel) -> float:
    """Battery percentage consumed by ``inferences`` runs executing ``executed_macs``."""
    consumed = (
        executed_macs * battery.joules_per_mac
        + inferences * battery.per_inference_overhead_joules
    )
    return consumed / battery.capacity_joules * 100.0


def simulate_streaming(
    model: Model,
    val_set: Dataset,
    battery: BatteryModel,
    rule: SkipRule = SkipRule.SKIP_ON_ZERO_ACTIVATION,
    epochs: int = 100,
) -> DischargeReport:
    """
    Run the validation set continuously for ``epochs`` passes on a simulated
    battery.

    Each epoch executes the MACs the zero-skipping model cannot skip. The run
    stops early, recording the epoch, once the battery is exhausted; the
    cumulative percentage is capped at 100.

    Raises:
        DatasetFormatError: if the validation set is empty
    """
    if epochs < 1:
        raise ValueError(f"epochs must be positive, got {epochs}")
    if not len(val_set):
        raise DatasetFormatError("cannot stream an empty validation set")
    report = energy_report(model, val_set.images, rule)
    inferences = len(val_set)
    macs = report.total_consumed
    percent = discharge_percent(macs, inferences, battery)
    consumed = percent / 100.0 * battery.capacity_joules
    wall = inferences * battery.seconds_per_inference

    discharge = DischargeReport(energy_ratio=report.energy_ratio, inferences_per_epoch=inferences)
    cumulative = 0.0
    for epoch in range(1, epochs + 1):
        cumulative = min(cumulative + percent, 100.0)
        discharge.rows.append(
            DischargeRow(
                epoch=epoch,
                executed_macs=macs,
                consumed_joules=consumed,
                percent_drop=percent,
                cumulative_percent=cumulative,
                wall_seconds=wall,
                discharge_rate_per_hour=percent / wall * 3600.0,
            )
        )
        if cumulative >= 100.0:
            discharge.exhausted_at_epoch = epoch
            logger.warning("Battery exhausted at epoch %d of %d", epoch, epochs)
            break
    logger.info(
        "Streaming %d epochs: %.4f%% per epoch, %.4f%% total",
        len(discharge.rows),
        percent,
        discharge.total_percent,
    )
    return discharge


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ReportWriteError(str(path), str(e)) from e


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise ReportWriteError(str(path), str(e)) from e


def emit_reports(
    report: SweepReport | DischargeReport | TrainHistory | EnergyReport,
    out_dir: str | Path,
) -> list[Path]:
    """
    Write a report as CSV and/or JSON under ``out_dir``.

    Sweeps → sweep.csv + sweep.json; discharge → discharge.csv +
    discharge.json; history → history.csv; energy → energy.json. Identical
    reports produce byte-identical files.

    Raises:
        ReportWriteError: naming the path that could not be written
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportWriteError(str(out), str(e)) from e

    written: list[Path] = []
    match report:
        case SweepReport():
            _write_csv(report.to_frame(), out / "sweep.csv")
            _write_text(out / "sweep.json", report.model_dump_json(indent=2))
            written += [out / "sweep.csv", out / "sweep.json"]
        case DischargeReport():
            _write_csv(report.to_frame(), out / "discharge.csv")
            _write_text(out / "discharge.json", report.model_dump_json(indent=2))
            written += [out / "discharge.csv", out / "discharge.json"]
        case TrainHistory():
            _write_csv(report.to_frame(), out / "history.csv")
            written.append(out / "history.csv")
        case EnergyReport():
            _write_text(out / "energy.json", report.model_dump_json(indent=2, by_alias=True))
            written.append(out / "energy.json")
    for path in written:
        logger.info("Wrote %s", path)
    return written


def _records(frame: pd.DataFrame) -> list[dict[str, Any]]:
    return [
        {key: (None if isinstance(v, float) and math.isnan(v) else v) for key, v in row.items()}
        for row in frame.to_dict(orient="records")
    ]


def read_sweep_csv(path: str | Path) -> list[SweepRow]:
    """Parse a sweep CSV written by emit_reports back into rows."""
    frame = pd.read_csv(path, float_precision="round_trip", dtype={"error": "object"})
    return [SweepRow.model_validate(record) for record in _records(frame)]


def read_discharge_csv(path: str | Path) -> list[DischargeRow]:
    frame = pd.read_csv(path, float_precision="round_trip")
    return [DischargeRow.model_validate(record) for record in _records(frame)]
