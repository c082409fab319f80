"""
Layer-wise mixture-of-formats selection.

For every layer each candidate format is tried (weights per-channel, plus
activations per-tensor in WA mode, one format for both), the configured error
is measured and the minimum kept. Ties go to the candidate with the highest
precedence in ``tie_break``.
"""

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from src.core.formats import FpFormat, IntFormat, NumberFormat, parse_format
from src.core.metrics import ErrorMetricKind, ErrorReduction, reduce_error
from src.core.quant import QuantScheme, ScaleSet, calibrate, compute_scales, fake_quant, quantize
from src.selection.report import LayerSelection, SelectionReport
from src.simulation.graph import (
    LayerQuantConfig,
    ModelGraph,
    TensorQuant,
    forward_fp,
    forward_quant,
    layer_output_error,
    model_output_error,
)
from src.storage.bundles import CalibBundle, QuantizedBundle, QuantizedLayer
from src.utils.cache import ScaleCache
from src.utils.errors import (
    EmptyCandidatesError,
    InvalidParameterError,
    LayerNotCalibratedError,
    MetricEvaluationError,
    QuantToolkitError,
    SelectionError,
    UncalibratedLayerError,
)

logger = logging.getLogger(__name__)

Format = Union[IntFormat, FpFormat]
CalibData = Union[CalibBundle, Mapping[str, Sequence[np.ndarray]], None]


class IsolationPolicy(str, Enum):
    """What the rest of the model looks like while one layer is evaluated."""
    ISOLATED = "isolated"
    SEQUENTIAL = "sequential"


class SelectionConfig(BaseModel):
    """Inputs of a selection run besides the model and calibration data."""
    is_w_only: bool = True
    format_candidates: List[NumberFormat]
    bit_width: int
    error_metric: Optional[ErrorMetricKind] = None
    reduction: ErrorReduction = ErrorReduction.MSE
    tie_break: List[str] = Field(default_factory=lambda: ["int", "fp"],
                                 description="Families or format names, highest precedence first")
    isolation: IsolationPolicy = IsolationPolicy.ISOLATED
    workers: int = Field(default=1, ge=1)

    @field_validator("format_candidates", mode="before")
    @classmethod
    def _parse_candidates(cls, v):
        if not v:
            raise EmptyCandidatesError()
        return [parse_format(c) if isinstance(c, str) else c for c in v]

    @model_validator(mode="after")
    def _check_widths(self) -> "SelectionConfig":
        widths = {fmt.bits for fmt in self.format_candidates}
        if widths != {self.bit_width}:
            raise InvalidParameterError(
                "candidates",
                f"All candidates must be {self.bit_width}-bit, got "
                f"{[f.name for f in self.format_candidates]}",
            )
        names = [fmt.name for fmt in self.format_candidates]
        if len(set(names)) != len(names):
            raise InvalidParameterError("candidates", f"Duplicate candidates in {names}")
        if self.error_metric is None:
            default = ErrorMetricKind.TENSOR_MSE if self.is_w_only else ErrorMetricKind.MODEL_OUTPUT_MSE
            self.error_metric = default
        return self

    def precedence(self, fmt: Format) -> int:
        family = "fp" if fmt.is_fp else "int"
        for rank, entry in enumerate(self.tie_break):
            if entry in (fmt.name, family):
                return rank
        return len(self.tie_break)

    def ordered_candidates(self) -> List[Format]:
        """Candidates in tie-break order (stable for equal precedence)."""
        return sorted(self.format_candidates, key=self.precedence)

    @property
    def needs_calibration(self) -> bool:
        return not self.is_w_only or self.error_metric is not ErrorMetricKind.TENSOR_MSE

    def echo(self) -> Dict:
        return {
            "is_w_only": self.is_w_only,
            "format_candidates": [f.name for f in self.format_candidates],
            "bit_width": self.bit_width,
            "error_metric": self.error_metric.value,
            "reduction": self.reduction.value,
            "tie_break": list(self.tie_break),
            "isolation": self.isolation.value,
        }


def weight_scheme(fmt: Format) -> QuantScheme:
    """Weights are scaled per output channel (rows of W)."""
    return QuantScheme.per_channel(fmt, axis=0)


def activation_scheme(fmt: Format) -> QuantScheme:
    return QuantScheme.per_tensor(fmt)


def _digest(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.md5()
    for arr in arrays:
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def calib_map(calib: CalibData) -> Dict[str, List[np.ndarray]]:
    if calib is None:
        return {}
    if isinstance(calib, CalibBundle):
        return dict(calib.batches)
    return {name: list(batches) for name, batches in calib.items()}


class FormatSelector:
    """
    Runs mixture-of-formats selection over a model.

    Candidate evaluations for different layers are independent under the
    isolated policy and run on ``config.workers`` threads; the report is
    assembled in layer order by the calling thread.
    """

    def __init__(self, model: ModelGraph, calib: CalibData, config: SelectionConfig,
                 cache: Optional[ScaleCache] = None):
        """
        Initialize selector.

        Args:
            model: Model to quantize
            calib: Per-layer input-activation batches (may be omitted for
                W-only tensor-error selection)
            config: Selection configuration
            cache: Scale cache shared across runs
        """
        self.model = model
        self.calib = calib_map(calib)
        self.config = config
        self.cache = cache or ScaleCache()
        self._reference = None
        # cache keys carry content digests so a shared cache never mixes models
        self._digests = {layer.name: _digest([layer.weight]) for layer in model.layers}
        self._calib_digests = {name: _digest(batches) for name, batches in self.calib.items()}
        logger.info(
            f"Initialized format selector: {len(model.layers)} layers, candidates="
            f"{[f.name for f in config.format_candidates]}, metric={config.error_metric.value}, "
            f"w_only={config.is_w_only}"
        )

    # scales

    def weight_scales(self, layer_name: str, fmt: Format) -> ScaleSet:
        layer = self.model.layer(layer_name)
        key = self.cache._generate_key("weight", layer=layer_name, format=fmt.name,
                                       digest=self._digests[layer_name])
        return self.cache.get_or_compute(key, lambda: compute_scales(layer.weight, weight_scheme(fmt)))

    def activation_scales(self, layer_name: str, fmt: Format) -> ScaleSet:
        batches = self.calib.get(layer_name)
        if not batches:
            raise LayerNotCalibratedError(layer_name)
        key = self.cache._generate_key("activation", layer=layer_name, format=fmt.name,
                                       digest=self._calib_digests[layer_name])
        return self.cache.get_or_compute(key, lambda: calibrate(batches, activation_scheme(fmt)))

    def layer_config(self, layer_name: str, fmt: Format) -> LayerQuantConfig:
        """Quantization config of one layer in one format."""
        weight = TensorQuant(scheme=weight_scheme(fmt), scales=self.weight_scales(layer_name, fmt))
        activation = None
        if not self.config.is_w_only:
            activation = TensorQuant(scheme=activation_scheme(fmt),
                                     scales=self.activation_scales(layer_name, fmt))
        return LayerQuantConfig(weight=weight, activation=activation)

    # errors

    def _model_inputs(self) -> List[np.ndarray]:
        first = self.model.layers[0].name
        inputs = self.calib.get(first)
        if not inputs:
            raise LayerNotCalibratedError(first)
        return inputs

    def _reference_outputs(self):
        if self._reference is None:
            self._reference = [forward_fp(self.model, x) for x in self._model_inputs()]
        return self._reference

    def _tensor_error(self, index: int, config: LayerQuantConfig) -> float:
        layer = self.model.layers[index]
        reduction = self.config.reduction
        error = reduce_error(layer.weight, fake_quant(layer.weight, config.weight.scheme, config.weight.scales),
                             reduction)
        if config.activation is not None:
            batches = self.calib[layer.name]
            act_errors = [
                reduce_error(b, fake_quant(b, config.activation.scheme, config.activation.scales), reduction)
                for b in batches
            ]
            error += math.fsum(act_errors) / len(act_errors)
        return error

    def _context(self, index: int, candidate: LayerQuantConfig,
                 chosen: Mapping[str, LayerQuantConfig]) -> Dict[str, LayerQuantConfig]:
        configs = {}
        for i, name in enumerate(self.model.layer_names):
            if i == index:
                configs[name] = candidate
            elif self.config.isolation is IsolationPolicy.SEQUENTIAL and i < index:
                configs[name] = chosen[name]
            else:
                configs[name] = LayerQuantConfig.unquantized()
        return configs

    def candidate_error(self, index: int, fmt: Format,
                        chosen: Optional[Mapping[str, LayerQuantConfig]] = None) -> float:
        """
        Error of quantizing layer ``index`` with ``fmt`` under the configured metric.

        Args:
            index: Layer position
            fmt: Candidate format
            chosen: Configs already selected for earlier layers (sequential policy)

        Returns:
            Non-negative error
        """
        layer = self.model.layers[index]
        config = self.layer_config(layer.name, fmt)
        metric = self.config.error_metric
        sequential = self.config.isolation is IsolationPolicy.SEQUENTIAL and index > 0

        if metric is ErrorMetricKind.TENSOR_MSE:
            return self._tensor_error(index, config)

        if metric is ErrorMetricKind.LAYER_OUTPUT_MSE and not sequential:
            batches = self.calib.get(layer.name)
            if not batches:
                raise LayerNotCalibratedError(layer.name)
            return layer_output_error(layer, config.weight, config.activation, batches,
                                      self.config.reduction)

        configs = self._context(index, config, chosen or {})
        if metric is ErrorMetricKind.MODEL_OUTPUT_MSE:
            return model_output_error(self.model, configs, self._model_inputs(), self.config.reduction,
                                      reference=self._reference_outputs())

        # sequential layer-output error: quantized upstream feeds this layer
        errors = [
            reduce_error(ref.layer_outputs[index],
                         forward_quant(self.model, configs, x).layer_outputs[index],
                         self.config.reduction)
            for ref, x in zip(self._reference_outputs(), self._model_inputs())
        ]
        return math.fsum(errors) / len(errors)

    def select_layer(self, index: int,
                     chosen: Optional[Mapping[str, LayerQuantConfig]] = None) -> LayerSelection:
        """Evaluate every candidate for one layer and keep the minimum."""
        layer = self.model.layers[index]
        if self.config.needs_calibration and not self.calib.get(layer.name):
            raise UncalibratedLayerError(layer.name)

        errors: Dict[str, float] = {}
        best: Optional[Format] = None
        min_error = math.inf
        for fmt in self.config.ordered_candidates():
            try:
                error = self.candidate_error(index, fmt, chosen)
            except LayerNotCalibratedError:
                raise UncalibratedLayerError(layer.name)
            except QuantToolkitError as e:
                raise MetricEvaluationError(layer.name, fmt.name, e)
            if not math.isfinite(error):
                raise MetricEvaluationError(layer.name, fmt.name, f"non-finite error {error}")
            errors[fmt.name] = error
            logger.debug(f"Layer {layer.name} candidate {fmt.name}: error={error!r}")
            if error < min_error:
                min_error, best = error, fmt

        logger.info(f"Layer {layer.name}: selected {best.name} (error={min_error!r})")
        return LayerSelection(layer=layer.name, chosen_format=best.name,
                              chosen_is_fp=best.is_fp, errors=errors)

    def _format(self, name: str) -> Format:
        return next(f for f in self.config.format_candidates if f.name == name)

    def run(self) -> Tuple[Dict[str, LayerQuantConfig], SelectionReport]:
        """
        Select a format for every layer.

        Returns:
            Final per-layer configs and the selection report

        Raises:
            SelectionError: On failure; ``report`` holds the layers finished so far
        """
        start = time.perf_counter()
        selections: List[LayerSelection] = []
        chosen: Dict[str, LayerQuantConfig] = {}

        def partial_report() -> SelectionReport:
            return SelectionReport(config=self.config.echo(), layers=list(selections), complete=False,
                                   wall_clock_seconds=time.perf_counter() - start)

        indices = range(len(self.model.layers))
        parallel = self.config.workers > 1 and self.config.isolation is IsolationPolicy.ISOLATED
        try:
            if parallel:
                with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                    futures = [pool.submit(self.select_layer, i) for i in indices]
                    for future in futures:
                        selections.append(future.result())
            else:
                for i in indices:
                    selection = self.select_layer(i, chosen)
                    selections.append(selection)
                    chosen[selection.layer] = self.layer_config(selection.layer,
                                                                self._format(selection.chosen_format))
        except SelectionError as e:
            e.report = partial_report()
            logger.error(f"Selection stopped after {len(selections)} layers: {e}")
            raise

        configs = {
            s.layer: chosen[s.layer] if s.layer in chosen
            else self.layer_config(s.layer, self._format(s.chosen_format))
            for s in selections
        }
        report = SelectionReport(config=self.config.echo(), layers=selections, complete=True,
                                 wall_clock_seconds=max(time.perf_counter() - start, 1e-9))
        logger.info(f"Selection finished: fp_fraction={report.fp_fraction:.3f}, "
                    f"{report.wall_clock_seconds:.3f}s, cache={self.cache.get_stats()}")
        return configs, report


def mofq_select(model: ModelGraph, calib: CalibData, cfg: SelectionConfig,
                cache: Optional[ScaleCache] = None) -> Tuple[Dict[str, LayerQuantConfig], SelectionReport]:
    """
    Choose the minimum-error format per layer.

    Args:
        model: Model
        calib: Per-layer calibration batches
        cfg: Selection configuration
        cache: Optional shared scale cache

    Returns:
        Per-layer quantization configs and the selection report
    """
    return FormatSelector(model, calib, cfg, cache).run()


def quantize_uniform(model: ModelGraph, calib: CalibData, fmt: Union[str, Format], is_w_only: bool,
                     error_metric: Optional[ErrorMetricKind] = None,
                     reduction: ErrorReduction = ErrorReduction.MSE,
                     cache: Optional[ScaleCache] = None) -> Tuple[Dict[str, LayerQuantConfig], SelectionReport]:
    """Single-format baseline: the selection pipeline with one candidate."""
    fmt = parse_format(fmt) if isinstance(fmt, str) else fmt
    cfg = SelectionConfig(is_w_only=is_w_only, format_candidates=[fmt], bit_width=fmt.bits,
                          error_metric=error_metric, reduction=reduction)
    return mofq_select(model, calib, cfg, cache)


def build_quantized_bundle(model: ModelGraph, configs: Mapping[str, LayerQuantConfig]) -> QuantizedBundle:
    """
    Pack selected configs into a storable quantized model.

    Layers whose config is unquantized keep their float weights.
    """
    layers = []
    for layer in model.layers:
        config = configs.get(layer.name, LayerQuantConfig.unquantized())
        fields = {"name": layer.name, "nonlinearity": layer.nonlinearity}
        if config.weight is not None:
            scales = config.weight.scales
            if scales is None:
                scales = compute_scales(layer.weight, config.weight.scheme)
            fields["weight_q"] = quantize(layer.weight, config.weight.scheme, scales)
        else:
            fields["weight"] = layer.weight
        if config.activation is not None:
            fields["act_scheme"] = config.activation.scheme
            fields["act_scales"] = config.activation.scales
        layers.append(QuantizedLayer(**fields))
    return QuantizedBundle(layers=layers)
