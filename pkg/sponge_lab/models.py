"""
Compact convolutional networks with activation recording.

Models are immutable values: a tuple of LayerSpecs, the named parameter arrays
and the input geometry. Training produces new models through ``with_params``.
``forward_traced`` runs a model on an autodiff Graph and records the layer
outputs the sponge objective consumes.
"""

import io
import json
import logging
import struct
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import BinaryIO

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .autodiff import (
    Array,
    Graph,
    Tensor,
    add_bias,
    as_array,
    conv2d,
    conv_output_size,
    depthwise_conv2d,
    global_avg_pool,
    matmul,
    relu,
)
from .config import ModelConfig, RecordMode, validated
from .errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPNGCKPT"
CHECKPOINT_VERSION = 1


class LayerKind(StrEnum):
    CONV = "conv"
    DEPTHWISE_CONV = "depthwise_conv"
    DENSE = "dense"
    RELU = "relu"
    GLOBAL_AVG_POOL = "global_avg_pool"


MAC_KINDS = frozenset({LayerKind.CONV, LayerKind.DEPTHWISE_CONV, LayerKind.DENSE})


class LayerSpec(BaseModel):
    """One layer of a model and its kind-specific hyperparameters."""

    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    channels: int | None = Field(None, ge=1)
    kernel_size: int = Field(1, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    units: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_kind_fields(self) -> "LayerSpec":
        if self.kind == LayerKind.CONV and self.channels is None:
            raise ValueError("conv layers need channels")
        if self.kind == LayerKind.DENSE and self.units is None:
            raise ValueError("dense layers need units")
        return self

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape."""
        match self.kind:
            case LayerKind.CONV | LayerKind.DEPTHWISE_CONV:
                if len(input_shape) != 3:
                    raise ShapeError(f"{self.kind} expects C×H×W input, got {input_shape}")
                c, h, w = input_shape
                ho = conv_output_size(h, self.kernel_size, self.stride, self.padding)
                wo = conv_output_size(w, self.kernel_size, self.stride, self.padding)
                channels = self.channels if self.kind == LayerKind.CONV else c
                assert channels is not None
                return (channels, ho, wo)
            case LayerKind.DENSE:
                if len(input_shape) != 1:
                    raise ShapeError(f"dense expects a flat input, got {input_shape}")
                assert self.units is not None
                return (self.units,)
            case LayerKind.GLOBAL_AVG_POOL:
                if len(input_shape) != 3:
                    raise ShapeError(f"global_avg_pool expects C×H×W, got {input_shape}")
                return (input_shape[0],)
            case LayerKind.RELU:
                return input_shape
        raise ShapeError(f"unknown layer kind {self.kind!r}")

    def param_shapes(self, input_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
        """Shapes of this layer's parameters, keyed by local name."""
        k = self.kernel_size
        match self.kind:
            case LayerKind.CONV:
                assert self.channels is not None
                return {"weight": (self.channels, input_shape[0], k, k)}
            case LayerKind.DEPTHWISE_CONV:
                return {"weight": (input_shape[0], k, k)}
            case LayerKind.DENSE:
                assert self.units is not None
                return {"weight": (input_shape[0], self.units), "bias": (self.units,)}
            case _:
                return {}


def param_name(index: int, local: str) -> str:
    return f"layer{index}.{local}"


def infer_shapes(
    layers: Sequence[LayerSpec], input_shape: tuple[int, ...]
) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer."""
    shapes = []
    shape = input_shape
    for layer in layers:
        shape = layer.output_shape(shape)
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class TraceEntry:
    layer_index: int
    kind: LayerKind
    activation: Tensor


@dataclass
class ActivationTrace:
    """Layer outputs captured during one forward pass, in layer order."""

    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TraceEntry]:
        return iter(self.entries)

    def __add__(self, other: "ActivationTrace") -> "ActivationTrace":
        return ActivationTrace(self.entries + other.entries)

    def relu_only(self) -> "ActivationTrace":
        return ActivationTrace([e for e in self.entries if e.kind == LayerKind.RELU])

    def arrays(self) -> list[Array]:
        return [e.activation.data for e in self.entries]

    @property
    def size(self) -> int:
        """Recorded entries summed over every layer and sample."""
        return sum(int(e.activation.data.size) for e in self.entries)


class Model:
    """An ordered layer stack with its named parameter tensors."""

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        params: Mapping[str, ArrayLike],
        input_shape: tuple[int, ...],
        num_classes: int,
        rng_seed: int = 0,
    ):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = num_classes
        self.rng_seed = rng_seed

        if not any(layer.kind == LayerKind.RELU for layer in self.layers):
            raise ShapeError("a model needs at least one relu layer")
        self.shapes = infer_shapes(self.layers, self.input_shape)
        if self.shapes[-1] != (num_classes,):
            raise ShapeError(
                f"model outputs {self.shapes[-1]}, expected ({num_classes},) logits"
            )

        expected = self.expected_param_shapes()
        if set(params) != set(expected):
            raise ShapeError(
                f"parameter names {sorted(params)} do not match layers {sorted(expected)}"
            )
        self.params: dict[str, Array] = {}
        for name, shape in expected.items():
            array = as_array(params[name])
            if array.shape != shape:
                raise ShapeError(f"{name} has shape {array.shape}, expected {shape}")
            self.params[name] = array

    def expected_param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            for local, param_shape in layer.param_shapes(shape).items():
                shapes[param_name(index, local)] = param_shape
            shape = layer.output_shape(shape)
        return shapes

    def layer_input_shape(self, index: int) -> tuple[int, ...]:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    @property
    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def with_params(self, params: Mapping[str, ArrayLike]) -> "Model":
        return Model(self.layers, params, self.input_shape, self.num_classes, self.rng_seed)

    def same_architecture(self, other: "Model") -> bool:
        return (
            self.layers == other.layers
            and self.input_shape == other.input_shape
            and self.num_classes == other.num_classes
        )

    def __repr__(self) -> str:
        kinds = ", ".join(layer.kind.value for layer in self.layers)
        return f"Model(input={self.input_shape}, classes={self.num_classes}, layers=[{kinds}])"


def build_model(
    layers: Sequence[LayerSpec],
    input_shape: tuple[int, ...],
    num_classes: int,
    seed: int = 0,
) -> Model:
    """
    Initialize a model from its layers.

    Weights are drawn in layer order from N(0, 2/fan_in) with a seeded
    generator; dense biases start at zero.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Array] = {}
    shape = tuple(input_shape)
    for index, layer in enumerate(layers):
        for local, param_shape in layer.param_shapes(shape).items():
            if local == "bias":
                params[param_name(index, local)] = np.zeros(param_shape)
                continue
            match layer.kind:
                case LayerKind.CONV:
                    fan_in = param_shape[1] * param_shape[2] * param_shape[3]
                case LayerKind.DEPTHWISE_CONV:
                    fan_in = param_shape[1] * param_shape[2]
                case _:
                    fan_in = param_shape[0]
            std = np.sqrt(2.0 / fan_in)
            params[param_name(index, local)] = rng.normal(0.0, std, size=param_shape)
        shape = layer.output_shape(shape)
    return Model(layers, params, shape_of(input_shape), num_classes, seed)


def shape_of(shape: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(d) for d in shape)


def toy_mobile_net_layers(num_classes: int, width_multiplier: float = 1.0) -> list[LayerSpec]:
    """Stem conv, two depthwise-separable blocks, pooling and a dense head."""

    def width(channels: int) -> int:
        return max(1, round(channels * width_multiplier))

    return [
        LayerSpec(kind=LayerKind.CONV, channels=width(8), kernel_size=3),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.DEPTHWISE_CONV, kernel_size=3, padding=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.CONV, channels=width(16), kernel_size=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.DEPTHWISE_CONV, kernel_size=3, stride=2, padding=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.CONV, channels=width(32), kernel_size=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.GLOBAL_AVG_POOL),
        LayerSpec(kind=LayerKind.DENSE, units=num_classes),
    ]


def build_toy_mobile_net(
    input_shape: Sequence[int],
    num_classes: int,
    width_multiplier: float = 1.0,
    seed: int = 0,
) -> Model:
    """
    Desk-scale stand-in for a compact mobile network.

    Args:
        input_shape: per-sample C×H×W, at least 3×3 spatially
        num_classes: logits produced by the dense head
        width_multiplier: scales every channel count
        seed: initialization seed

    Raises:
        ConfigError: if width_multiplier is not positive
        ShapeError: if the input is too small for the block stack
    """
    config = validated(ModelConfig, width_multiplier=width_multiplier, seed=seed)
    layers = toy_mobile_net_layers(num_classes, config.width_multiplier)
    model = build_model(layers, shape_of(input_shape), num_classes, config.seed)
    logger.debug("Built %r with %d parameters", model, model.param_count)
    return model


def _run(
    model: Model, batch: Tensor | ArrayLike, graph: Graph | None, record: RecordMode | None
) -> tuple[Tensor, ActivationTrace]:
    if isinstance(batch, Tensor):
        graph = batch.graph
        x = batch
    else:
        graph = graph if graph is not None else Graph()
        x = graph.constant(batch)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input {model.input_shape}")

    params = {name: graph.parameter(name, value) for name, value in model.params.items()}
    trace = ActivationTrace()
    for index, layer in enumerate(model.layers):
        match layer.kind:
            case LayerKind.CONV:
                x = conv2d(x, params[param_name(index, "weight")], layer.stride, layer.padding)
            case LayerKind.DEPTHWISE_CONV:
                x = depthwise_conv2d(
                    x, params[param_name(index, "weight")], layer.stride, layer.padding
                )
            case LayerKind.DENSE:
                x = add_bias(
                    matmul(x, params[param_name(index, "weight")]),
                    params[param_name(index, "bias")],
                )
            case LayerKind.RELU:
                x = relu(x)
            case LayerKind.GLOBAL_AVG_POOL:
                x = global_avg_pool(x)
        if record == RecordMode.ALL or (record == RecordMode.RELU and layer.kind == LayerKind.RELU):
            trace.entries.append(TraceEntry(index, layer.kind, x))
    return x, trace


def forward(model: Model, batch: ArrayLike, graph: Graph | None = None) -> Tensor:
    """Logits for an N×C×H×W batch, without recording activations."""
    logits, _ = _run(model, batch, graph, None)
    return logits


def forward_traced(
    model: Model,
    batch: ArrayLike,
    graph: Graph | None = None,
    record: RecordMode = RecordMode.ALL,
) -> tuple[Tensor, ActivationTrace]:
    """
    Logits plus the recorded layer outputs.

    With ``RecordMode.ALL`` every layer's output is recorded; ``RecordMode.RELU``
    keeps post-ReLU outputs only. Recording never changes the numerics.
    """
    return _run(model, batch, graph, record)


def _write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return data


def save_checkpoint(model: Model, path: str | Path) -> Path:
    """
    Write a model as a versioned binary container.

    Layout: magic, version (u32), header length (u32) and JSON header with the
    layer list and geometry, parameter count (u32), then per parameter its
    name length (u32), name bytes, rank (u32), extents (<i8) and data (<f8).
    """
    path = Path(path)
    header = json.dumps(
        {
            "layers": [layer.model_dump(mode="json") for layer in model.layers],
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes,
            "rng_seed": model.rng_seed,
        },
        sort_keys=True,
    ).encode("utf-8")

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _write_u32(f, CHECKPOINT_VERSION)
        _write_u32(f, len(header))
        f.write(header)
        _write_u32(f, len(model.params))
        for name, value in model.params.items():
            encoded = name.encode("utf-8")
            _write_u32(f, len(encoded))
            f.write(encoded)
            _write_u32(f, value.ndim)
            f.write(np.asarray(value.shape, dtype="<i8").tobytes())
            f.write(value.astype("<f8").tobytes())
    logger.info("Saved checkpoint %s (%d parameters)", path, model.param_count)
    return path


def load_checkpoint(path: str | Path) -> Model:
    """Read a checkpoint written by save_checkpoint; round-trips bit-exactly."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    with io.BytesIO(raw) as f:
        if _read_exact(f, len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a sponge-lab checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, header_len, "header").decode("utf-8"))
            layers = [LayerSpec.model_validate(item) for item in header["layers"]]
        except (ValueError, KeyError) as e:
            raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e

        (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        params: dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            extents = np.frombuffer(_read_exact(f, 8 * rank, f"{name} extents"), dtype="<i8")
            size = int(np.prod(extents)) if rank else 1
            data = np.frombuffer(_read_exact(f, 8 * size, f"{name} data"), dtype="<f8")
            params[name] = data.reshape(tuple(int(e) for e in extents)).astype(np.float64)
        if f.read(1):
            raise CheckpointError(f"trailing bytes after parameters in {path}")

    try:
        return Model(
            layers,
            params,
            tuple(header["input_shape"]),
            int(header["num_classes"]),
            int(header.get("rng_seed", 0)),
        )
    except (ShapeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(
            f"checkpoint {path} does not describe a valid model: {e}"
        ) from e
