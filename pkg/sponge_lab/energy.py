"""
Zero-skipping accelerator cost model.

Every multiply-accumulate costs one unit unless the skip rule finds a zero
operand, in which case it costs nothing. The energy ratio is consumed over
worst-case units; sparse activations pull it down and a sponge-poisoned model
pushes it back toward 1.

Padded border taps count toward the worst case but are never skipped: they
are not runtime operands.
"""

import logging
from enum import StrEnum
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field

from .autodiff import Array, conv_output_size
from .config import RecordMode
from .errors import ArchitectureMismatchError, ShapeError
from .models import MAC_KINDS, LayerKind, LayerSpec, Model, forward_traced, param_name

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256


class SkipRule(StrEnum):
    SKIP_ON_ZERO_ACTIVATION = "skip_on_zero_activation"
    SKIP_ON_ZERO_WEIGHT = "skip_on_zero_weight"
    SKIP_ON_EITHER = "skip_on_either"


class LayerEnergy(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    layer_index: int = Field(alias="k")
    worst_case_macs: int = Field(ge=0, alias="worst")
    skipped_macs: int = Field(ge=0, alias="skipped")
    activation_density: float = Field(ge=0, le=1, alias="density")


class EnergyReport(BaseModel):
    """Per-layer MAC accounting and the aggregate energy ratio."""

    model_config = ConfigDict(frozen=True)

    layers: list[LayerEnergy]
    total_worst: int
    total_consumed: int
    energy_ratio: float

    @classmethod
    def from_layers(cls, layers: list[LayerEnergy]) -> "EnergyReport":
        total_worst = sum(layer.worst_case_macs for layer in layers)
        total_consumed = total_worst - sum(layer.skipped_macs for layer in layers)
        ratio = total_consumed / total_worst if total_worst else 1.0
        return cls(
            layers=layers,
            total_worst=total_worst,
            total_consumed=total_consumed,
            energy_ratio=ratio,
        )

    def to_json_dict(self) -> dict[str, Any]:
        return self.model_dump(by_alias=True)


def worst_case_macs(layer: LayerSpec, input_shape: tuple[int, ...]) -> int:
    """
    Multiply sites of a layer when nothing is skipped.

    Args:
        layer: the layer
        input_shape: batched input shape (N×C×H×W or N×in)
    """
    n = input_shape[0]
    out_shape = layer.output_shape(tuple(input_shape[1:]))
    k = layer.kernel_size
    match layer.kind:
        case LayerKind.CONV:
            f, ho, wo = out_shape
            return n * f * ho * wo * input_shape[1] * k * k
        case LayerKind.DEPTHWISE_CONV:
            c, ho, wo = out_shape
            return n * c * ho * wo * k * k
        case LayerKind.DENSE:
            return n * input_shape[1] * out_shape[0]
        case _:
            return 0


def _window_zeros(
    activations: Array, layer: LayerSpec
) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """
    Zero indicators of every (n, c, h', w', i, j) tap, excluding padding.

    Returns:
        (zero-activation indicator, in-bounds indicator), both shaped
        n × c × h' × w' × kh × kw
    """
    p, s, k = layer.padding, layer.stride, layer.kernel_size
    pad = ((0, 0), (0, 0), (p, p), (p, p))
    zeros = np.pad((activations == 0).astype(np.int64), pad)
    inside = np.pad(np.ones(activations.shape, dtype=np.int64), pad)
    zero_windows = sliding_window_view(zeros, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    inside_windows = sliding_window_view(inside, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return zero_windows, inside_windows


def skipped_macs(
    layer: LayerSpec, input_activations: ArrayLike, weights: ArrayLike, rule: SkipRule
) -> int:
    """
    Count multiply sites where the rule finds an exactly-zero operand.

    Raises:
        ShapeError: if the operands do not fit the layer
    """
    if layer.kind not in MAC_KINDS:
        return 0
    x = np.asarray(input_activations, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    expected_w = layer.param_shapes(tuple(x.shape[1:]))["weight"]
    if w.shape != expected_w:
        raise ShapeError(f"{layer.kind} weights {w.shape}, expected {expected_w}")

    w_zero = (w == 0).astype(np.int64)
    match layer.kind:
        case LayerKind.DENSE:
            if x.ndim != 2:
                raise ShapeError(f"dense expects N×in activations, got {x.shape}")
            n = x.shape[0]
            a_zero = (x == 0).astype(np.int64)
            act = int(a_zero.sum()) * w.shape[1]
            wgt = int(w_zero.sum()) * n
            both = int(np.einsum("ni,io->", a_zero, w_zero))
        case LayerKind.CONV | LayerKind.DEPTHWISE_CONV:
            if x.ndim != 4:
                raise ShapeError(f"{layer.kind} expects N×C×H×W activations, got {x.shape}")
            n, _, h, wd = x.shape
            conv_output_size(h, layer.kernel_size, layer.stride, layer.padding)
            conv_output_size(wd, layer.kernel_size, layer.stride, layer.padding)
            a_zero, inside = _window_zeros(x, layer)
            if layer.kind == LayerKind.CONV:
                f = w.shape[0]
                act = int(a_zero.sum()) * f
                # weight zeros only skip taps that land inside the input
                wgt = int(np.einsum("nchwij,fcij->", inside, w_zero))
                both = int(np.einsum("nchwij,fcij->", a_zero, w_zero))
            else:
                act = int(a_zero.sum())
                wgt = int(np.einsum("nchwij,cij->", inside, w_zero))
                both = int(np.einsum("nchwij,cij->", a_zero, w_zero))
        case _:
            return 0

    match rule:
        case SkipRule.SKIP_ON_ZERO_ACTIVATION:
            return act
        case SkipRule.SKIP_ON_ZERO_WEIGHT:
            return wgt
        case SkipRule.SKIP_ON_EITHER:
            return act + wgt - both
    raise ValueError(f"unknown skip rule {rule!r}")


def energy_report(
    model: Model, batch: ArrayLike, rule: SkipRule = SkipRule.SKIP_ON_ZERO_ACTIVATION
) -> EnergyReport:
    """
    Run the model and account every MAC-bearing layer.

    Each layer's skipped count comes from its input activations (the previous
    layer's output, or the batch) and its current weights. Counts are summed
    over the batch, which is evaluated in chunks.
    """
    images = np.asarray(batch, dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {images.shape} does not match input {model.input_shape}")

    mac_layers = [i for i, layer in enumerate(model.layers) if layer.kind in MAC_KINDS]
    worst = dict.fromkeys(mac_layers, 0)
    skipped = dict.fromkeys(mac_layers, 0)
    nonzero = dict.fromkeys(mac_layers, 0)
    total = dict.fromkeys(mac_layers, 0)

    for start in range(0, images.shape[0], EVAL_CHUNK):
        chunk = images[start : start + EVAL_CHUNK]
        _, trace = forward_traced(model, chunk, record=RecordMode.ALL)
        outputs = trace.arrays()
        for index in mac_layers:
            layer = model.layers[index]
            inputs = chunk if index == 0 else outputs[index - 1]
            weights = model.params[param_name(index, "weight")]
            worst[index] += worst_case_macs(layer, inputs.shape)
            skipped[index] += skipped_macs(layer, inputs, weights, rule)
            nonzero[index] += int(np.count_nonzero(inputs))
            total[index] += int(inputs.size)

    report = EnergyReport.from_layers(
        [
            LayerEnergy(
                layer_index=index,
                worst_case_macs=worst[index],
                skipped_macs=skipped[index],
                activation_density=nonzero[index] / total[index] if total[index] else 0.0,
            )
            for index in mac_layers
        ]
    )
    logger.debug("Energy ratio %.4f under %s", report.energy_ratio, rule)
    return report


def energy_gap(attacked: EnergyReport, clean: EnergyReport) -> float:
    """
    attacked.energy_ratio − clean.energy_ratio (×100 for percentage points).

    Raises:
        ArchitectureMismatchError: if the reports cover different layers or
            worst-case counts
    """
    shape_a = [(layer.layer_index, layer.worst_case_macs) for layer in attacked.layers]
    shape_c = [(layer.layer_index, layer.worst_case_macs) for layer in clean.layers]
    if shape_a != shape_c:
        raise ArchitectureMismatchError(
            "energy reports describe different architectures or batch sizes"
        )
    return attacked.energy_ratio - clean.energy_ratio
