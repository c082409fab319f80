"""
Unit tests for layer-wise format selection.
"""

import math

import numpy as np
import pytest

from src.commands.data import DataCommands
from src.config import GenConfig, ToolkitSettings
from src.core.metrics import ErrorMetricKind, ErrorReduction, reduce_error
from src.core.quant import QuantScheme, calibrate, compute_scales, dequantize, fake_quant
from src.selection.selector import (
    FormatSelector,
    IsolationPolicy,
    SelectionConfig,
    build_quantized_bundle,
    mofq_select,
    quantize_uniform,
)
from src.simulation.graph import (
    LayerQuantConfig,
    LinearLayer,
    ModelGraph,
    TensorQuant,
    calibration_activations,
    compare_models,
    forward_fp,
    graph_from_quantized,
    layer_output_error,
    model_output_error,
)
from src.storage.bundles import InputsBundle, ModelBundle, Nonlinearity, load_typed
from src.utils.cache import ScaleCache
from src.utils.errors import (
    EmptyCandidatesError,
    InvalidParameterError,
    MetricEvaluationError,
    SelectionError,
    UncalibratedLayerError,
)

CANDIDATES = {4: ["int4", "fp4_e2m1"], 8: ["int8", "fp8_e4m3"]}


def build_model(seed: int) -> ModelGraph:
    """Six layers alternating light- and heavy-tailed weights."""
    rng = np.random.default_rng(seed)
    dims = [8, 12, 16, 12, 16, 12, 6]
    layers = []
    for k in range(6):
        shape = (dims[k + 1], dims[k])
        if k % 2:
            weight = rng.standard_t(2, shape) * 0.1
        else:
            weight = rng.uniform(-0.3, 0.3, shape)
        nonlinearity = Nonlinearity.NONE if k == 5 else (Nonlinearity.RELU if k % 2 else Nonlinearity.GELU)
        layers.append(LinearLayer(name=f"fc{k}", weight=weight.astype(np.float32), nonlinearity=nonlinearity))
    return ModelGraph(layers=layers)


@pytest.fixture
def model():
    """Fixture for a six-layer model."""
    return build_model(11)


@pytest.fixture
def calib(model):
    """Fixture for per-layer calibration activations from three input batches."""
    rng = np.random.default_rng(12)
    inputs = [rng.standard_t(4, (6, 8)).astype(np.float32) for _ in range(3)]
    return calibration_activations(model, inputs)


def make_config(bits=4, w_only=True, metric=None, reduction=ErrorReduction.MSE, **kwargs) -> SelectionConfig:
    return SelectionConfig(is_w_only=w_only, format_candidates=CANDIDATES[bits], bit_width=bits,
                           error_metric=metric, reduction=reduction, **kwargs)


def oracle_error(model, calib, index, fmt, cfg) -> float:
    """Error of one candidate computed straight from the definitions."""
    layer = model.layers[index]
    w_scheme = QuantScheme.per_channel(fmt, axis=0)
    w_cfg = TensorQuant(scheme=w_scheme, scales=compute_scales(layer.weight, w_scheme))
    a_cfg = None
    if not cfg.is_w_only:
        a_scheme = QuantScheme.per_tensor(fmt)
        a_cfg = TensorQuant(scheme=a_scheme, scales=calibrate(calib[layer.name], a_scheme))

    if cfg.error_metric is ErrorMetricKind.TENSOR_MSE:
        error = reduce_error(layer.weight, fake_quant(layer.weight, w_scheme, w_cfg.scales), cfg.reduction)
        if a_cfg is not None:
            per_batch = [reduce_error(b, fake_quant(b, a_cfg.scheme, a_cfg.scales), cfg.reduction)
                         for b in calib[layer.name]]
            error += math.fsum(per_batch) / len(per_batch)
        return error
    if cfg.error_metric is ErrorMetricKind.LAYER_OUTPUT_MSE:
        return layer_output_error(layer, w_cfg, a_cfg, calib[layer.name], cfg.reduction)
    configs = {name: LayerQuantConfig.unquantized() for name in model.layer_names}
    configs[layer.name] = LayerQuantConfig(weight=w_cfg, activation=a_cfg)
    return model_output_error(model, configs, calib["fc0"], cfg.reduction)


class TestSelectionConfig:
    """Test selection configuration checks."""

    def test_default_metric_by_mode(self):
        assert make_config(w_only=True).error_metric is ErrorMetricKind.TENSOR_MSE
        assert make_config(w_only=False).error_metric is ErrorMetricKind.MODEL_OUTPUT_MSE

    def test_empty_candidates(self):
        with pytest.raises(EmptyCandidatesError):
            SelectionConfig(format_candidates=[], bit_width=4)

    def test_width_mismatch(self):
        with pytest.raises(InvalidParameterError):
            SelectionConfig(format_candidates=["int4", "fp8_e4m3"], bit_width=4)

    def test_duplicates(self):
        with pytest.raises(InvalidParameterError):
            SelectionConfig(format_candidates=["int4", "int4"], bit_width=4)

    def test_tie_break_order(self):
        cfg = make_config(tie_break=["fp"])
        assert [f.name for f in cfg.ordered_candidates()] == ["fp4_e2m1", "int4"]
        cfg = make_config(tie_break=["int4"])
        assert [f.name for f in cfg.ordered_candidates()] == ["int4", "fp4_e2m1"]

    def test_needs_calibration(self):
        assert not make_config().needs_calibration
        assert make_config(metric=ErrorMetricKind.LAYER_OUTPUT_MSE).needs_calibration
        assert make_config(w_only=False, metric=ErrorMetricKind.TENSOR_MSE).needs_calibration


class TestSelection:
    """Test the selector against an exhaustive per-layer sweep."""

    @pytest.mark.parametrize("bits", [4, 8])
    @pytest.mark.parametrize("w_only", [True, False])
    @pytest.mark.parametrize("metric", list(ErrorMetricKind))
    def test_matches_exhaustive_sweep(self, model, calib, bits, w_only, metric):
        cfg = make_config(bits=bits, w_only=w_only, metric=metric)
        _, report = mofq_select(model, calib, cfg)

        assert report.complete
        assert [s.layer for s in report.layers] == model.layer_names
        for index, selection in enumerate(report.layers):
            expected = {fmt.name: oracle_error(model, calib, index, fmt, cfg) for fmt in cfg.ordered_candidates()}
            assert list(selection.errors) == list(expected)
            for name, error in expected.items():
                assert selection.errors[name] == pytest.approx(error, rel=1e-12, abs=1e-300)
            best = min(selection.errors.values())
            assert selection.chosen_format == next(name for name, e in selection.errors.items() if e == best)

    def test_mixture_never_worse_than_uniform(self, model, calib):
        """Test every layer's chosen error is at most any single format's error."""
        cfg = make_config()
        _, report = mofq_select(model, calib, cfg)
        for fmt in cfg.format_candidates:
            _, uniform = quantize_uniform(model, calib, fmt, is_w_only=True)
            for mixed, single in zip(report.layers, uniform.layers):
                assert mixed.chosen_error <= single.chosen_error
        assert math.fsum(s.chosen_error for s in report.layers) <= min(
            math.fsum(s.errors[f.name] for s in report.layers) for f in cfg.format_candidates
        )

    def test_nsr_reduction(self, model, calib):
        cfg = make_config(reduction=ErrorReduction.NSR, metric=ErrorMetricKind.LAYER_OUTPUT_MSE)
        _, report = mofq_select(model, calib, cfg)
        for index, selection in enumerate(report.layers):
            for fmt in cfg.ordered_candidates():
                assert selection.errors[fmt.name] == pytest.approx(
                    oracle_error(model, calib, index, fmt, cfg), rel=1e-12
                )

    def test_ties_follow_tie_break(self):
        zero = ModelGraph(layers=[LinearLayer(name="fc0", weight=np.zeros((4, 4)))])
        _, report = mofq_select(zero, None, make_config())
        assert report.layers[0].errors == {"int4": 0.0, "fp4_e2m1": 0.0}
        assert report.chosen_formats == {"fc0": "int4"}
        _, report = mofq_select(zero, None, make_config(tie_break=["fp", "int"]))
        assert report.chosen_formats == {"fc0": "fp4_e2m1"}

    def test_uniform_baseline(self, model, calib):
        configs, report = quantize_uniform(model, calib, "fp4_e2m1", is_w_only=False)
        assert set(report.chosen_formats.values()) == {"fp4_e2m1"}
        assert report.fp_fraction == 1.0
        assert all(c.activation is not None and c.activation.scales is not None for c in configs.values())
        _, report = quantize_uniform(model, calib, "int8", is_w_only=True)
        assert report.fp_fraction == 0.0

    def test_deterministic(self, model, calib):
        cfg = make_config(w_only=False)
        _, first = mofq_select(model, calib, cfg)
        _, second = mofq_select(model, calib, cfg)
        assert first.to_payload() == second.to_payload()

    def test_workers_match_serial(self, model, calib):
        serial = mofq_select(model, calib, make_config(w_only=False))[1]
        parallel = mofq_select(model, calib, make_config(w_only=False, workers=4))[1]
        assert parallel.to_payload() == serial.to_payload()

    def test_isolated_layers_independent(self, model, calib):
        """Test one layer's decision ignores every other layer's choice."""
        cfg = make_config(w_only=False)
        _, report = mofq_select(model, calib, cfg)
        selector = FormatSelector(model, calib, cfg)
        for index in reversed(range(len(model.layers))):
            assert selector.select_layer(index) == report.layers[index]

    def test_sequential_policy(self, model, calib):
        """Test the last layer's recorded error is the final model's error."""
        cfg = make_config(w_only=False, isolation=IsolationPolicy.SEQUENTIAL)
        configs, report = mofq_select(model, calib, cfg)
        isolated = mofq_select(model, calib, make_config(w_only=False))[1]
        assert report.layers[0] == isolated.layers[0]
        final = model_output_error(model, configs, calib["fc0"])
        assert report.layers[-1].chosen_error == pytest.approx(final, rel=1e-12)

    def test_sequential_layer_metric(self, model, calib):
        cfg = make_config(metric=ErrorMetricKind.LAYER_OUTPUT_MSE, isolation=IsolationPolicy.SEQUENTIAL)
        configs, report = mofq_select(model, calib, cfg)
        assert report.complete
        assert list(configs) == model.layer_names

    def test_partial_report_on_failure(self, model, calib):
        """Test a missing calibration entry stops the run with the finished layers attached."""
        del calib["fc2"]
        with pytest.raises(UncalibratedLayerError) as exc_info:
            mofq_select(model, calib, make_config(w_only=False, metric=ErrorMetricKind.LAYER_OUTPUT_MSE))
        report = exc_info.value.report
        assert isinstance(exc_info.value, SelectionError)
        assert not report.complete
        assert [s.layer for s in report.layers] == ["fc0", "fc1"]

    def test_undefined_metric_wrapped(self):
        zero = ModelGraph(layers=[LinearLayer(name="fc0", weight=np.zeros((4, 4)))])
        with pytest.raises(MetricEvaluationError) as exc_info:
            mofq_select(zero, None, make_config(reduction=ErrorReduction.NSR))
        assert exc_info.value.layer == "fc0"
        assert exc_info.value.report.layers == []

    def test_wa_without_calibration(self, model):
        with pytest.raises(UncalibratedLayerError):
            mofq_select(model, None, make_config(w_only=False))


class TestScaleCache:
    """Test scale reuse across runs."""

    def test_second_run_hits_cache(self, model, calib):
        cache = ScaleCache()
        mofq_select(model, calib, make_config(w_only=False), cache)
        misses = cache.get_stats()["misses"]
        mofq_select(model, calib, make_config(w_only=False), cache)
        stats = cache.get_stats()
        assert stats["misses"] == misses
        assert stats["hits"] > 0

    def test_shared_cache_never_mixes_models(self):
        """Test same-named layers of different models get their own scales."""
        cache = ScaleCache()
        first, second = build_model(1), build_model(2)
        mofq_select(first, None, make_config(), cache)
        shared = mofq_select(second, None, make_config(), cache)[1]
        fresh = mofq_select(second, None, make_config())[1]
        assert shared.to_payload() == fresh.to_payload()


class TestQuantizedBundle:
    """Test packing selected configs."""

    def test_bundle_matches_selection(self, model, calib):
        configs, report = mofq_select(model, calib, make_config(w_only=False))
        bundle = build_quantized_bundle(model, configs)
        assert [l.format_name for l in bundle.layers] == [s.chosen_format for s in report.layers]
        for layer, entry in zip(model.layers, bundle.layers):
            config = configs[layer.name]
            np.testing.assert_array_equal(
                dequantize(entry.weight_q),
                fake_quant(layer.weight, config.weight.scheme, config.weight.scales),
            )
            assert entry.act_scales == config.activation.scales

    def test_unquantized_layers_keep_weights(self, model):
        bundle = build_quantized_bundle(model, {})
        assert all(entry.weight_q is None for entry in bundle.layers)
        np.testing.assert_array_equal(bundle.layers[0].weight, model.layers[0].weight)

    def test_reference_outputs_unchanged(self, model, calib):
        before = forward_fp(model, calib["fc0"][0]).output.copy()
        mofq_select(model, calib, make_config(w_only=False))
        np.testing.assert_array_equal(forward_fp(model, calib["fc0"][0]).output, before)


class TestEvalDominance:
    """Test the W8A8 mixture on held-out inputs against both single-format models."""

    # Default gen settings; all seeds satisfy the bound.
    SEEDS = [0, 1, 2, 3, 4]

    @staticmethod
    def eval_nsr(model, configs, inputs) -> float:
        candidate, act_configs = graph_from_quantized(build_quantized_bundle(model, configs))
        return compare_models(model, candidate, act_configs, inputs)[ErrorReduction.NSR]

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mixture_nsr_within_best_uniform(self, seed, tmp_path):
        DataCommands(ToolkitSettings()).gen(GenConfig(out=str(tmp_path), seed=seed))
        model = ModelGraph.from_bundle(load_typed(tmp_path / "model", ModelBundle))
        calib = calibration_activations(model, load_typed(tmp_path / "calib_inputs", InputsBundle).batches)
        eval_inputs = load_typed(tmp_path / "eval_inputs", InputsBundle).batches

        cfg = make_config(bits=8, w_only=False, metric=ErrorMetricKind.MODEL_OUTPUT_MSE)
        mixed, _ = mofq_select(model, calib, cfg)
        uniform = [
            quantize_uniform(model, calib, name, is_w_only=False, error_metric=ErrorMetricKind.MODEL_OUTPUT_MSE)[0]
            for name in ("int8", "fp8_e4m3")
        ]
        best = min(self.eval_nsr(model, configs, eval_inputs) for configs in uniform)
        assert self.eval_nsr(model, mixed, eval_inputs) <= best + 1e-9
