"""
Test configuration and fixtures for sponge-lab tests.
"""

import numpy as np
import pytest
from fastapi import FastAPI

from sponge_lab.config import SpongeParams, TrainConfig
from sponge_lab.data import split_dataset, synth_dataset
from sponge_lab.models import LayerKind, LayerSpec, build_model, build_toy_mobile_net, save_checkpoint
from sponge_lab.server import SpongeLabMCP

TINY_INPUT = (1, 4, 4)
TINY_CLASSES = 3


@pytest.fixture
def rng():
    """Seeded generator for randomized oracle cases."""
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_layers():
    """Conv, depthwise and dense layers at the smallest useful extents."""
    return [
        LayerSpec(kind=LayerKind.CONV, channels=2, kernel_size=3, padding=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.DEPTHWISE_CONV, kernel_size=3, stride=2, padding=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.GLOBAL_AVG_POOL),
        LayerSpec(kind=LayerKind.DENSE, units=TINY_CLASSES),
    ]


@pytest.fixture
def tiny_model(tiny_layers):
    """A 1×4×4-input, 3-class model."""
    return build_model(tiny_layers, TINY_INPUT, TINY_CLASSES, seed=0)


@pytest.fixture
def desk_model():
    """The default toy mobile net on 1×8×8 inputs with 10 classes."""
    return build_toy_mobile_net((1, 8, 8), 10, seed=0)


@pytest.fixture
def tiny_split():
    """Disjoint train/val synthetic sets matching tiny_model."""
    full = synth_dataset(64, TINY_CLASSES, TINY_INPUT, seed=3)
    return split_dataset(full, 16, seed=3)


@pytest.fixture
def desk_batch():
    """Sixteen 1×8×8 synthetic images."""
    return synth_dataset(16, 10, (1, 8, 8), seed=5).images


@pytest.fixture
def fast_config():
    """Two short epochs with a moderate attack."""
    return TrainConfig(
        alpha=0.05,
        epochs=2,
        batch_size=8,
        seed=0,
        sponge=SpongeParams(sigma=1e-2, lam=1.0, poison_fraction=0.25),
    )


@pytest.fixture
def checkpoint_dir(tmp_path, tiny_model):
    """A directory holding one saved tiny checkpoint."""
    save_checkpoint(tiny_model, tmp_path / "tiny.ckpt")
    return tmp_path


@pytest.fixture
def basic_app():
    """Create a basic FastAPI app for testing."""
    return FastAPI(title="Test API", version="1.0.0")


@pytest.fixture
def mcp_instance(basic_app, checkpoint_dir):
    """Create a SpongeLabMCP instance over the tiny checkpoint directory."""
    return SpongeLabMCP(basic_app, checkpoint_dir)


@pytest.fixture
def custom_mcp_instance(basic_app, checkpoint_dir):
    """Create a SpongeLabMCP instance with custom configuration."""
    return SpongeLabMCP(
        app=basic_app,
        checkpoint_dir=checkpoint_dir,
        mount_path="/custom-mcp",
        server_name="Custom Test Server",
        server_version="2.0.0",
        section_name="custom",
        list_checkpoints_tool_name="customListCheckpoints",
        energy_report_tool_name="customEnergyReport",
        simulate_streaming_tool_name="customSimulateStreaming",
    )
