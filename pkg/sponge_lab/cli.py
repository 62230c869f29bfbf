"""
Command-line entry point: ``sponge-lab {train,sweep,energy,stream,serve}``.

Any flag may also come from a YAML file given with ``--config``; flags on the
command line win over file values.
"""

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .config import (
    BatteryModel,
    EnergyScale,
    RecordMode,
    TrainConfig,
    load_config_file,
    validated,
)
from .data import (
    Dataset,
    Split,
    downsample,
    load_cifar10,
    load_idx,
    split_dataset,
    synth_dataset,
)
from .energy import SkipRule, energy_gap, energy_report
from .errors import ConfigError, DatasetFormatError, SpongeError
from .experiments import SweepAxis, SweepSpec, emit_reports, run_sweep, simulate_streaming
from .models import build_toy_mobile_net, load_checkpoint, save_checkpoint
from .trainer import train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

SYNTH_TRAIN = 2000
SYNTH_VAL = 500
DESK_SIZE = 8

DEFAULT_GRIDS = {
    SweepAxis.LAMBDA: [0.0, 1.0, 5.0, 10.0, 20.0],
    SweepAxis.SIGMA: [1e-1, 1e-4, 1e-6, 1e-9, 1e-12],
    SweepAxis.POISON_FRACTION: [0.05, 0.1, 0.25, 0.5],
}

IDX_FILES = {
    Split.TRAIN: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    Split.VAL: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _concat(parts: list[Dataset], split: Split) -> Dataset:
    return Dataset(
        np.concatenate([part.images for part in parts]),
        np.concatenate([part.labels for part in parts]),
        split,
        parts[0].num_classes,
    )


def load_datasets(source: str, seed: int = 0) -> tuple[Dataset, Dataset]:
    """
    Resolve ``--dataset`` into a train/val pair.

    ``synth`` is the 8×8 desk fixture (2000 train, 500 val). A ``.bin`` file is
    one CIFAR-10 batch split 4:1; a directory holds either CIFAR-10 batches
    (``data_batch_*.bin`` and ``test_batch.bin``) or an MNIST-style IDX
    quadruple, which is downsampled to 8×8.
    """
    if source == "synth":
        full = synth_dataset(SYNTH_TRAIN + SYNTH_VAL, seed=seed)
        return split_dataset(full, SYNTH_VAL, seed)

    path = Path(source)
    if path.is_file():
        dataset = load_cifar10(path)
        return split_dataset(dataset, max(1, len(dataset) // 5), seed)
    if not path.is_dir():
        raise DatasetFormatError(f"dataset {source} is neither 'synth' nor an existing path")

    batches = sorted(path.glob("data_batch_*.bin"))
    if batches:
        train_set = _concat([load_cifar10(batch) for batch in batches], Split.TRAIN)
        val_set = load_cifar10(path / "test_batch.bin", Split.VAL)
        return train_set, val_set

    images, labels = IDX_FILES[Split.TRAIN]
    if (path / images).is_file():
        val_images, val_labels = IDX_FILES[Split.VAL]
        train_set = load_idx(path / images, path / labels, Split.TRAIN)
        val_set = load_idx(path / val_images, path / val_labels, Split.VAL)
        return downsample(train_set, DESK_SIZE), downsample(val_set, DESK_SIZE)

    raise DatasetFormatError(f"{source} holds neither CIFAR-10 batches nor IDX files")


def parse_grid(value: str | Sequence[float]) -> list[float]:
    """Grid values from ``"0,1,5"`` or a YAML list."""
    if isinstance(value, str):
        try:
            return [float(part) for part in value.split(",") if part.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"invalid grid {value!r}: {e}") from e
    return [float(v) for v in value]


def train_config(args: argparse.Namespace) -> TrainConfig:
    return validated(
        TrainConfig,
        alpha=args.alpha,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        record=args.record,
        energy_scale=args.energy_scale,
        energy_clip=args.energy_clip or None,
        sponge={
            "sigma": args.sigma,
            "lambda": args.lam,
            "poison_fraction": args.poison_fraction,
        },
    )


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2))


def cmd_train(args: argparse.Namespace) -> int:
    config = train_config(args)
    train_set, val_set = load_datasets(args.dataset, args.seed)
    model = build_toy_mobile_net(
        train_set.input_shape, train_set.num_classes, args.width_multiplier, args.seed
    )
    model, history = train(model, train_set, val_set, config)
    report = energy_report(model, val_set.images, SkipRule(args.skip_rule))

    out = Path(args.out)
    emit_reports(history, out)
    emit_reports(report, out)
    checkpoint = save_checkpoint(model, out / "model.ckpt")
    logger.info("Saved checkpoint to %s", checkpoint)
    _print_json(
        {
            "checkpoint": str(checkpoint),
            "val_accuracy": history.records[-1].val_accuracy,
            "energy_ratio": report.energy_ratio,
        }
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    axis = SweepAxis(args.axis)
    grid = parse_grid(args.grid) if args.grid is not None else DEFAULT_GRIDS[axis]
    try:
        sweep = SweepSpec(
            axis=axis,
            grid=grid,
            base=train_config(args),
            model={"width_multiplier": args.width_multiplier, "seed": args.seed},
            skip_rule=SkipRule(args.skip_rule),
            workers=args.workers,
        )
    except ValueError as e:
        raise ConfigError(f"invalid sweep: {e}") from e

    train_set, val_set = load_datasets(args.dataset, args.seed)
    report = run_sweep(sweep, train_set, val_set)
    emit_reports(report, args.out)

    ok_rows = [row for row in report.rows if row.ok]
    if len(ok_rows) > 1:
        logger.info("Spearman(energy_ratio, %s) = %.3f", axis, report.spearman())
    best = report.best()
    if best is not None:
        logger.info(
            "Best stealthy point: %s=%g energy_ratio=%.4f",
            axis,
            best.axis_value,
            best.energy_ratio,
        )

    if report.failed and not args.allow_partial:
        logger.error(
            "%d grid points failed; rerun with --allow-partial to accept",
            len(report.failed),
        )
        return 1
    return 0


def cmd_energy(args: argparse.Namespace) -> int:
    rule = SkipRule(args.skip_rule)
    _, val_set = load_datasets(args.dataset, args.seed)
    attacked = energy_report(load_checkpoint(args.checkpoint), val_set.images, rule)

    if args.baseline is None:
        _print_json(attacked.to_json_dict())
    else:
        clean = energy_report(load_checkpoint(args.baseline), val_set.images, rule)
        _print_json(
            {
                "checkpoint": attacked.to_json_dict(),
                "baseline": clean.to_json_dict(),
                "energy_gap": energy_gap(attacked, clean),
            }
        )
    if args.out is not None:
        emit_reports(attacked, args.out)
    return 0


def cmd_stream(args: argparse.Namespace) -> int:
    battery = validated(
        BatteryModel,
        capacity_mah=args.capacity_mah,
        nominal_voltage_mv=args.voltage_mv,
        joules_per_mac=args.joules_per_mac,
        per_inference_overhead_joules=args.overhead_joules,
        seconds_per_inference=args.seconds_per_inference,
    )
    _, val_set = load_datasets(args.dataset, args.seed)
    model = load_checkpoint(args.checkpoint)
    report = simulate_streaming(
        model, val_set, battery, SkipRule(args.skip_rule), args.stream_epochs
    )
    emit_reports(report, args.out)
    _print_json(
        {
            "energy_ratio": report.energy_ratio,
            "total_percent": report.total_percent,
            "exhausted_at_epoch": report.exhausted_at_epoch,
        }
    )
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    from fastapi import FastAPI

    from .server import SpongeLabMCP

    app = FastAPI(title="sponge-lab", version=__version__)
    SpongeLabMCP(app, args.checkpoint_dir, server_version=__version__)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML file of flag defaults")
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--dataset", default="synth", help="'synth' or a CIFAR-10/IDX path")
    parser.add_argument(
        "--skip-rule",
        default=SkipRule.SKIP_ON_ZERO_ACTIVATION.value,
        choices=[rule.value for rule in SkipRule],
    )


def _add_training(parser: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    group = parser.add_argument_group("training")
    group.add_argument("--lambda", dest="lam", type=float, default=defaults.sponge.lam)
    group.add_argument("--sigma", type=float, default=defaults.sponge.sigma)
    group.add_argument(
        "--poison-frac",
        dest="poison_fraction",
        type=float,
        default=defaults.sponge.poison_fraction,
    )
    group.add_argument("--alpha", type=float, default=defaults.alpha)
    group.add_argument("--epochs", type=int, default=defaults.epochs)
    group.add_argument("--batch-size", type=int, default=defaults.batch_size)
    group.add_argument("--width-multiplier", type=float, default=1.0)
    group.add_argument(
        "--record", default=defaults.record.value, choices=[mode.value for mode in RecordMode]
    )
    group.add_argument(
        "--energy-scale",
        default=defaults.energy_scale.value,
        choices=[scale.value for scale in EnergyScale],
    )
    group.add_argument(
        "--energy-clip",
        type=float,
        default=defaults.energy_clip,
        help="entrywise bound on the energy step; 0 disables it",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sponge-lab",
        description="Sponge poisoning experiments on a zero-skipping accelerator model",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", help="train one model and save a checkpoint")
    _add_common(p)
    _add_training(p)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("sweep", help="train one model per grid point on an attack axis")
    _add_common(p)
    _add_training(p)
    p.add_argument("--axis", default=SweepAxis.LAMBDA.value, choices=[a.value for a in SweepAxis])
    p.add_argument("--grid", type=parse_grid, help="comma-separated axis values")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--allow-partial", action="store_true")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(handler=cmd_sweep)

    p = commands.add_parser("energy", help="energy report of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="second checkpoint to compare against")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_energy)

    p = commands.add_parser("stream", help="simulate battery drain of continuous inference")
    _add_common(p)
    battery = BatteryModel()
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stream-epochs", type=int, default=100)
    p.add_argument("--capacity-mah", type=float, default=battery.capacity_mah)
    p.add_argument("--voltage-mv", type=float, default=battery.nominal_voltage_mv)
    p.add_argument("--joules-per-mac", type=float, default=battery.joules_per_mac)
    p.add_argument(
        "--overhead-joules", type=float, default=battery.per_inference_overhead_joules
    )
    p.add_argument(
        "--seconds-per-inference", type=float, default=battery.seconds_per_inference
    )
    p.add_argument("--out", default="runs/stream")
    p.set_defaults(handler=cmd_stream)

    p = commands.add_parser("serve", help="serve checkpoints as MCP tools")
    p.add_argument("--config", help="YAML file of flag defaults")
    p.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    p.add_argument("--checkpoint-dir", default="runs")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)

    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise ConfigError(f"unknown command {command}")


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse flags, taking defaults from ``--config`` when given."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args

    values = load_config_file(args.config)
    sub = _subparser(parser, args.command)
    known = {action.dest for action in sub._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown settings in {args.config}: {', '.join(unknown)}")
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SpongeError as e:
        print(f"sponge-lab: {e}", file=sys.stderr)
        return 2

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        return int(args.handler(args))
    except SpongeError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
