"""
Tests for the sponge-lab command line.
"""

import json

import numpy as np
import pytest

import sponge_lab.experiments as experiments
from sponge_lab.cli import (
    DEFAULT_GRIDS,
    load_datasets,
    main,
    parse_args,
    parse_grid,
    train_config,
)
from sponge_lab.config import EnergyScale
from sponge_lab.data import CIFAR_RECORD, Dataset, Split, write_idx
from sponge_lab.errors import DatasetFormatError, NonFiniteGradientError
from sponge_lab.experiments import SweepAxis, read_sweep_csv
from sponge_lab.trainer import train


@pytest.fixture
def idx_dir(tmp_path):
    """An MNIST-style directory of 12×12 images: 40 train, 12 val."""
    rng = np.random.default_rng(1)
    root = tmp_path / "idx"
    root.mkdir()
    for prefix, n in (("train", 40), ("t10k", 12)):
        dataset = Dataset(rng.random((n, 1, 12, 12)), np.arange(n) % 10)
        write_idx(dataset, root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte")
    return root


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


class TestParseArgs:
    """Test flag parsing and config file precedence."""

    def test_train_defaults(self):
        args = parse_args(["train"])
        assert args.lam == 20.0
        assert args.sigma == 1e-6
        assert args.poison_fraction == 0.25
        assert args.dataset == "synth"
        assert args.skip_rule == "skip_on_zero_activation"
        assert args.out == "runs/train"

    def test_attack_flags(self):
        args = parse_args(["sweep", "--lambda", "5", "--poison-frac", "0.1", "--grid", "1,2"])
        assert args.lam == 5.0
        assert args.poison_fraction == 0.1
        assert args.grid == [1.0, 2.0]

    def test_energy_step_flags(self):
        config = train_config(parse_args(["train", "--energy-scale", "sample", "--energy-clip", "0"]))
        assert config.energy_scale == EnergyScale.SAMPLE
        assert config.energy_clip is None
        default = train_config(parse_args(["train"]))
        assert (default.energy_scale, default.energy_clip) == (EnergyScale.ELEMENT, 1.0)

    def test_config_file_supplies_defaults(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("lambda: 5\nepochs: 3\npoison-frac: 0.5\n")
        args = parse_args(["train", "--config", str(path)])
        assert (args.lam, args.epochs, args.poison_fraction) == (5.0, 3, 0.5)

    def test_command_line_wins(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("epochs: 3\n")
        assert parse_args(["train", "--config", str(path), "--epochs", "7"]).epochs == 7

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "config.yaml"
        path.write_text("learning_rate: 3\n")
        assert main(["train", "--config", str(path)]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_invalid_skip_rule(self):
        with pytest.raises(SystemExit):
            parse_args(["energy", "--checkpoint", "x", "--skip-rule", "never"])


class TestParseGrid:
    """Test grid values."""

    def test_comma_separated(self):
        assert parse_grid("0, 1,5") == [0.0, 1.0, 5.0]

    def test_yaml_list(self):
        assert parse_grid([1, 2.5]) == [1.0, 2.5]

    def test_default_grids(self):
        assert DEFAULT_GRIDS[SweepAxis.LAMBDA] == [0.0, 1.0, 5.0, 10.0, 20.0]
        assert DEFAULT_GRIDS[SweepAxis.POISON_FRACTION] == [0.05, 0.1, 0.25, 0.5]


class TestLoadDatasets:
    """Test --dataset resolution."""

    def test_synth(self):
        train_set, val_set = load_datasets("synth")
        assert (len(train_set), len(val_set)) == (2000, 500)
        assert train_set.input_shape == (1, 8, 8)
        assert val_set.split == Split.VAL

    def test_cifar_file(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(b"".join(bytes([i % 10]) + bytes(CIFAR_RECORD - 1) for i in range(10)))
        train_set, val_set = load_datasets(str(path))
        assert (len(train_set), len(val_set)) == (8, 2)
        assert train_set.input_shape == (3, 32, 32)

    def test_cifar_directory(self, tmp_path):
        record = bytes([1]) + bytes(CIFAR_RECORD - 1)
        (tmp_path / "data_batch_1.bin").write_bytes(record * 2)
        (tmp_path / "data_batch_2.bin").write_bytes(record * 3)
        (tmp_path / "test_batch.bin").write_bytes(record)
        train_set, val_set = load_datasets(str(tmp_path))
        assert (len(train_set), len(val_set)) == (5, 1)

    def test_idx_directory_downsampled(self, idx_dir):
        train_set, val_set = load_datasets(str(idx_dir))
        assert train_set.input_shape == (1, 8, 8)
        assert (len(train_set), len(val_set)) == (40, 12)

    def test_missing_path(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            load_datasets(str(tmp_path / "absent"))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            load_datasets(str(tmp_path))


class TestCommands:
    """Test commands end to end on a small IDX dataset."""

    def test_train_energy_stream(self, capsys, tmp_path, idx_dir):
        out = tmp_path / "run"
        code, stdout = run(
            capsys, "train", "--dataset", str(idx_dir), "--epochs", "1", "--batch-size", "8", "--out", str(out)
        )
        assert code == 0
        summary = json.loads(stdout)
        assert 0.0 <= summary["energy_ratio"] <= 1.0
        assert {p.name for p in out.iterdir()} == {"history.csv", "energy.json", "model.ckpt"}

        checkpoint = str(out / "model.ckpt")
        code, stdout = run(
            capsys, "energy", "--dataset", str(idx_dir), "--checkpoint", checkpoint, "--baseline", checkpoint
        )
        assert code == 0
        assert json.loads(stdout)["energy_gap"] == 0.0

        stream_out = tmp_path / "stream"
        code, stdout = run(
            capsys,
            "stream",
            "--dataset",
            str(idx_dir),
            "--checkpoint",
            checkpoint,
            "--stream-epochs",
            "2",
            "--out",
            str(stream_out),
        )
        assert code == 0
        assert json.loads(stdout)["exhausted_at_epoch"] is None
        assert (stream_out / "discharge.csv").is_file()

    def test_missing_checkpoint(self, capsys, tmp_path, idx_dir):
        code, _ = run(capsys, "energy", "--dataset", str(idx_dir), "--checkpoint", str(tmp_path / "absent.ckpt"))
        assert code == 2

    def test_invalid_attack_value(self, capsys, idx_dir):
        code, _ = run(capsys, "train", "--dataset", str(idx_dir), "--sigma", "0")
        assert code == 2


class TestSweepCommand:
    """Test sweep exit codes."""

    @pytest.fixture(autouse=True)
    def failing_lambda_one(self, monkeypatch):
        def fake_train(model, train_set, val_set, config):
            if config.sponge.lam == 1.0:
                raise NonFiniteGradientError("overflow", ["layer0.weight"])
            return train(model, train_set, val_set, config)

        monkeypatch.setattr(experiments, "train", fake_train)

    def sweep(self, capsys, out, idx_dir, *extra):
        return run(
            capsys,
            "sweep",
            "--dataset",
            str(idx_dir),
            "--grid",
            "1",
            "--epochs",
            "1",
            "--batch-size",
            "8",
            "--out",
            str(out),
            *extra,
        )

    def test_failed_point_exits_one(self, capsys, tmp_path, idx_dir):
        code, _ = self.sweep(capsys, tmp_path / "sweep", idx_dir)
        assert code == 1
        rows = read_sweep_csv(tmp_path / "sweep" / "sweep.csv")
        assert [row.axis_value for row in rows] == [0.0, 1.0]
        assert rows[1].error.startswith("NonFiniteGradientError")

    def test_allow_partial(self, capsys, tmp_path, idx_dir):
        code, _ = self.sweep(capsys, tmp_path / "sweep", idx_dir, "--allow-partial")
        assert code == 0


class TestServeCommand:
    """Test the serve command without starting a server."""

    def test_mounts_checkpoint_directory(self, monkeypatch, checkpoint_dir):
        import uvicorn

        served = {}

        def fake_run(app, host, port):
            served.update(app=app, host=host, port=port)

        monkeypatch.setattr(uvicorn, "run", fake_run)
        assert main(["serve", "--checkpoint-dir", str(checkpoint_dir), "--port", "8123"]) == 0
        assert served["port"] == 8123
        route_paths = [getattr(route, "path", None) for route in served["app"].routes]
        assert "/mcp" in route_paths
        assert "/health" in route_paths
