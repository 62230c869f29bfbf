"""
Tests for the zero-skipping energy simulator.
"""

import numpy as np
import pytest

from sponge_lab.energy import (
    EnergyReport,
    LayerEnergy,
    SkipRule,
    energy_gap,
    energy_report,
    skipped_macs,
    worst_case_macs,
)
from sponge_lab.errors import ArchitectureMismatchError, ShapeError
from sponge_lab.models import LayerKind, LayerSpec, Model

RULES = list(SkipRule)


def enumerate_sites(layer, x, w):
    """Every multiply site as (activation or None for padding, weight)."""
    if layer.kind == LayerKind.DENSE:
        n, fan_in = x.shape
        for b in range(n):
            for i in range(fan_in):
                for o in range(w.shape[1]):
                    yield x[b, i], w[i, o]
        return

    n, c, h, wd = x.shape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    filters = w.shape[0] if layer.kind == LayerKind.CONV else c
    for b in range(n):
        for f in range(filters):
            channels = range(c) if layer.kind == LayerKind.CONV else [f]
            for i in range(ho):
                for j in range(wo):
                    for ci in channels:
                        for di in range(k):
                            for dj in range(k):
                                r, q = i * s + di - p, j * s + dj - p
                                inside = 0 <= r < h and 0 <= q < wd
                                weight = w[f, ci, di, dj] if layer.kind == LayerKind.CONV else w[f, di, dj]
                                yield (x[b, ci, r, q] if inside else None), weight


def oracle_counts(layer, x, w, rule):
    worst = 0
    skipped = 0
    for activation, weight in enumerate_sites(layer, x, w):
        worst += 1
        if activation is None:
            continue
        zero_a, zero_w = activation == 0, weight == 0
        match rule:
            case SkipRule.SKIP_ON_ZERO_ACTIVATION:
                skipped += zero_a
            case SkipRule.SKIP_ON_ZERO_WEIGHT:
                skipped += zero_w
            case SkipRule.SKIP_ON_EITHER:
                skipped += zero_a or zero_w
    return worst, skipped


def sparse(rng, shape, density=0.5):
    return rng.normal(size=shape) * (rng.random(shape) < density)


def hand_model(dense_weight):
    """conv 1×1 → relu → pool → dense(2) on 1×2×2 inputs."""
    layers = [
        LayerSpec(kind=LayerKind.CONV, channels=1, kernel_size=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.GLOBAL_AVG_POOL),
        LayerSpec(kind=LayerKind.DENSE, units=2),
    ]
    params = {
        "layer0.weight": np.ones((1, 1, 1, 1)),
        "layer3.weight": np.array([dense_weight]),
        "layer3.bias": np.zeros(2),
    }
    return Model(layers, params, (1, 2, 2), 2)


class TestWorstCaseMacs:
    """Test multiply-site counts with nothing skipped."""

    def test_dense(self):
        assert worst_case_macs(LayerSpec(kind=LayerKind.DENSE, units=2), (1, 4)) == 8

    def test_conv(self):
        layer = LayerSpec(kind=LayerKind.CONV, channels=1, kernel_size=3)
        assert worst_case_macs(layer, (1, 1, 3, 3)) == 9

    def test_non_mac_layers(self):
        assert worst_case_macs(LayerSpec(kind=LayerKind.RELU), (2, 3, 4, 4)) == 0
        assert worst_case_macs(LayerSpec(kind=LayerKind.GLOBAL_AVG_POOL), (2, 3, 4, 4)) == 0

    @pytest.mark.parametrize(
        "layer,x_shape,w_shape",
        [
            (LayerSpec(kind=LayerKind.CONV, channels=3, kernel_size=3, padding=1), (2, 2, 4, 5), (3, 2, 3, 3)),
            (LayerSpec(kind=LayerKind.CONV, channels=2, kernel_size=2, stride=2), (1, 3, 5, 5), (2, 3, 2, 2)),
            (LayerSpec(kind=LayerKind.DEPTHWISE_CONV, kernel_size=3, stride=2, padding=1), (2, 3, 5, 4), (3, 3, 3)),
            (LayerSpec(kind=LayerKind.DENSE, units=4), (3, 5), (5, 4)),
        ],
    )
    def test_enumeration_oracle(self, rng, layer, x_shape, w_shape):
        x, w = rng.normal(size=x_shape), rng.normal(size=w_shape)
        worst, _ = oracle_counts(layer, x, w, SkipRule.SKIP_ON_ZERO_ACTIVATION)
        assert worst_case_macs(layer, x_shape) == worst

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            worst_case_macs(LayerSpec(kind=LayerKind.DENSE, units=2), (1, 2, 3, 3))


class TestSkippedMacs:
    """Test skippable multiply-site counts."""

    @pytest.mark.parametrize("rule", RULES)
    def test_dense_operands_skip_nothing(self, rng, rule):
        layer = LayerSpec(kind=LayerKind.CONV, channels=2, kernel_size=3, padding=1)
        x = rng.uniform(0.1, 1.0, size=(2, 2, 4, 4))
        w = rng.uniform(0.1, 1.0, size=(2, 2, 3, 3))
        assert skipped_macs(layer, x, w, rule) == 0

    def test_dense_direct_count(self):
        layer = LayerSpec(kind=LayerKind.DENSE, units=2)
        w = np.ones((4, 2))
        x = np.array([[1.0, 0.0, 1.0, 0.0]])
        assert skipped_macs(layer, x, w, SkipRule.SKIP_ON_ZERO_ACTIVATION) == 4

    @pytest.mark.parametrize("rule", RULES)
    @pytest.mark.parametrize(
        "layer,x_shape,w_shape",
        [
            (LayerSpec(kind=LayerKind.CONV, channels=3, kernel_size=3, padding=1), (2, 2, 4, 5), (3, 2, 3, 3)),
            (LayerSpec(kind=LayerKind.CONV, channels=2, kernel_size=2, stride=2), (1, 3, 5, 5), (2, 3, 2, 2)),
            (LayerSpec(kind=LayerKind.DEPTHWISE_CONV, kernel_size=3, padding=1), (2, 3, 4, 4), (3, 3, 3)),
            (LayerSpec(kind=LayerKind.DEPTHWISE_CONV, kernel_size=3, stride=2, padding=1), (1, 2, 5, 4), (2, 3, 3)),
            (LayerSpec(kind=LayerKind.DENSE, units=4), (3, 5), (5, 4)),
        ],
    )
    def test_enumeration_oracle(self, rng, layer, x_shape, w_shape, rule):
        x, w = sparse(rng, x_shape), sparse(rng, w_shape)
        _, expected = oracle_counts(layer, x, w, rule)
        assert skipped_macs(layer, x, w, rule) == expected

    def test_either_dominates_single_rules(self, rng):
        layer = LayerSpec(kind=LayerKind.CONV, channels=3, kernel_size=3, padding=1)
        for _ in range(10):
            x, w = sparse(rng, (2, 2, 5, 5)), sparse(rng, (3, 2, 3, 3))
            either = skipped_macs(layer, x, w, SkipRule.SKIP_ON_EITHER)
            assert either >= skipped_macs(layer, x, w, SkipRule.SKIP_ON_ZERO_ACTIVATION)
            assert either >= skipped_macs(layer, x, w, SkipRule.SKIP_ON_ZERO_WEIGHT)
            assert either <= worst_case_macs(layer, x.shape)

    def test_zeroing_an_activation_never_decreases(self, rng):
        layer = LayerSpec(kind=LayerKind.DEPTHWISE_CONV, kernel_size=3, padding=1)
        x, w = sparse(rng, (1, 2, 4, 4)), rng.normal(size=(2, 3, 3))
        before = skipped_macs(layer, x, w, SkipRule.SKIP_ON_ZERO_ACTIVATION)
        for idx in np.ndindex(x.shape):
            zeroed = x.copy()
            zeroed[idx] = 0.0
            assert skipped_macs(layer, zeroed, w, SkipRule.SKIP_ON_ZERO_ACTIVATION) >= before

    def test_padding_is_never_skipped(self):
        """An all-zero weight skips only taps that land inside the input."""
        layer = LayerSpec(kind=LayerKind.DEPTHWISE_CONV, kernel_size=3, padding=1)
        x = np.ones((1, 1, 2, 2))
        w = np.zeros((1, 3, 3))
        assert worst_case_macs(layer, x.shape) == 36
        assert skipped_macs(layer, x, w, SkipRule.SKIP_ON_ZERO_WEIGHT) == 16

    def test_non_mac_layer(self, rng):
        assert skipped_macs(LayerSpec(kind=LayerKind.RELU), np.zeros((1, 2)), np.zeros(0), SkipRule.SKIP_ON_EITHER) == 0

    def test_weight_shape_mismatch(self):
        layer = LayerSpec(kind=LayerKind.DENSE, units=2)
        with pytest.raises(ShapeError):
            skipped_macs(layer, np.ones((1, 4)), np.ones((3, 2)), SkipRule.SKIP_ON_ZERO_WEIGHT)


class TestEnergyReport:
    """Test whole-model accounting."""

    def test_hand_enumerated_counts(self):
        """conv: 4 sites, 2 zero inputs; dense: 2 sites."""
        batch = np.array([[[[1.0, 0.0], [0.0, 2.0]]]])
        model = hand_model([1.0, 0.0])

        report = energy_report(model, batch, SkipRule.SKIP_ON_ZERO_ACTIVATION)
        assert [layer.layer_index for layer in report.layers] == [0, 3]
        assert [layer.worst_case_macs for layer in report.layers] == [4, 2]
        assert [layer.skipped_macs for layer in report.layers] == [2, 0]
        assert [layer.activation_density for layer in report.layers] == [0.5, 1.0]
        assert report.total_worst == 6
        assert report.total_consumed == 4
        assert report.energy_ratio == pytest.approx(4 / 6)

        assert energy_report(model, batch, SkipRule.SKIP_ON_ZERO_WEIGHT).energy_ratio == pytest.approx(5 / 6)
        assert energy_report(model, batch, SkipRule.SKIP_ON_EITHER).energy_ratio == pytest.approx(3 / 6)

    @pytest.mark.parametrize("rule", RULES)
    def test_all_positive_ratio_is_one(self, desk_model, rng, rule):
        params = {name: np.abs(value) + 0.1 for name, value in desk_model.params.items()}
        model = desk_model.with_params(params)
        report = energy_report(model, rng.uniform(0.1, 1.0, size=(4, 1, 8, 8)), rule)
        assert report.energy_ratio == 1.0
        assert report.total_consumed == report.total_worst

    def test_zero_batch_skips_first_conv(self, desk_model, desk_batch):
        zero = energy_report(desk_model, np.zeros_like(desk_batch))
        dense = energy_report(desk_model, desk_batch)
        assert zero.layers[0].skipped_macs == zero.layers[0].worst_case_macs
        assert zero.energy_ratio < dense.energy_ratio
        assert 0.0 <= zero.energy_ratio

    def test_totals_equal_layer_sums(self, desk_model, desk_batch):
        report = energy_report(desk_model, desk_batch)
        assert [layer.layer_index for layer in report.layers] == [0, 2, 4, 6, 8, 11]
        assert report.total_worst == sum(layer.worst_case_macs for layer in report.layers)
        skipped = sum(layer.skipped_macs for layer in report.layers)
        assert report.total_consumed == report.total_worst - skipped
        for layer in report.layers:
            assert 0 <= layer.skipped_macs <= layer.worst_case_macs
        assert 0.0 < report.energy_ratio <= 1.0

    def test_counts_sum_over_chunks(self, desk_model):
        from sponge_lab.data import synth_dataset

        images = synth_dataset(300, 10, (1, 8, 8), seed=1).images
        whole = energy_report(desk_model, images)
        first = energy_report(desk_model, images[:256])
        rest = energy_report(desk_model, images[256:])
        for total, a, b in zip(whole.layers, first.layers, rest.layers, strict=True):
            assert total.worst_case_macs == a.worst_case_macs + b.worst_case_macs
            assert total.skipped_macs == a.skipped_macs + b.skipped_macs

    def test_batch_shape_mismatch(self, desk_model):
        with pytest.raises(ShapeError):
            energy_report(desk_model, np.zeros((2, 1, 6, 6)))

    def test_json_uses_short_keys(self, desk_model, desk_batch):
        data = energy_report(desk_model, desk_batch).to_json_dict()
        assert set(data) == {"layers", "total_worst", "total_consumed", "energy_ratio"}
        assert set(data["layers"][0]) == {"k", "worst", "skipped", "density"}

    def test_empty_report_ratio(self):
        assert EnergyReport.from_layers([]).energy_ratio == 1.0


class TestEnergyGap:
    """Test paired report comparison."""

    def test_identical_reports(self, desk_model, desk_batch):
        report = energy_report(desk_model, desk_batch)
        assert energy_gap(report, report) == 0.0

    def test_signed_difference(self):
        layers = [LayerEnergy(layer_index=0, worst_case_macs=100, skipped_macs=10, activation_density=0.9)]
        clean = EnergyReport.from_layers(
            [LayerEnergy(layer_index=0, worst_case_macs=100, skipped_macs=30, activation_density=0.7)]
        )
        attacked = EnergyReport.from_layers(layers)
        assert energy_gap(attacked, clean) == pytest.approx(0.2)

    def test_architecture_mismatch(self, desk_model, desk_batch):
        with pytest.raises(ArchitectureMismatchError):
            energy_gap(energy_report(desk_model, desk_batch), energy_report(desk_model, desk_batch[:4]))
