"""
Sequential linear-layer simulator with reference and fake-quantized forward passes.

Layer ``k`` computes ``A_out = f(A_in @ W.T)`` with ``W`` shaped [out, in],
``A_in`` shaped [batch, in] and ``f`` the layer's nonlinearity. Matmuls and
accumulation run in float64 whatever the storage precision.
"""

import logging
import math
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from src.core.metrics import ErrorReduction, reduce_error
from src.core.quant import QuantScheme, ScaleSet, dequantize, fake_quant
from src.storage.bundles import ModelBundle, Nonlinearity, QuantizedBundle
from src.utils.errors import (
    InvalidParameterError,
    LayerNotCalibratedError,
    ModelValidationError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

# tanh approximation of GELU
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class LinearLayer(BaseModel):
    """One linear layer with an optional elementwise nonlinearity."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    weight: np.ndarray
    nonlinearity: Nonlinearity = Nonlinearity.NONE

    @model_validator(mode="after")
    def _check_weight(self) -> "LinearLayer":
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ValueError(f"layer {self.name!r} weight must be [out, in], got {self.weight.shape}")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError(f"layer {self.name!r} weight has non-finite values")
        return self

    @property
    def in_features(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_features(self) -> int:
        return int(self.weight.shape[0])


class ModelGraph(BaseModel):
    """Ordered, shape-consistent list of linear layers."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layers: List[LinearLayer]

    @model_validator(mode="after")
    def _check_chain(self) -> "ModelGraph":
        if not self.layers:
            raise ModelValidationError(None, None, "model has no layers")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ModelValidationError(prev.name, nxt.name)
        return self

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "ModelGraph":
        bundle.validate_chain()
        return cls(layers=[
            LinearLayer(name=spec.name, weight=bundle.tensors[spec.weight], nonlinearity=spec.nonlinearity)
            for spec in bundle.layers
        ])

    @property
    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> LinearLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise InvalidParameterError("layer", f"Unknown layer: {name}")


class TensorQuant(BaseModel):
    """Scheme for one tensor plus its scales (weights may compute scales on the fly)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    scheme: QuantScheme
    scales: Optional[ScaleSet] = None


class LayerQuantConfig(BaseModel):
    """How a layer is quantized; both fields empty means unquantized."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weight: Optional[TensorQuant] = None
    activation: Optional[TensorQuant] = None

    @model_validator(mode="after")
    def _same_format(self) -> "LayerQuantConfig":
        if self.weight is not None and self.activation is not None:
            w_fmt = self.weight.scheme.format
            a_fmt = self.activation.scheme.format
            if w_fmt != a_fmt:
                raise ValueError(
                    f"weight ({w_fmt.name}) and activation ({a_fmt.name}) formats must match within a layer"
                )
        return self

    @classmethod
    def unquantized(cls) -> "LayerQuantConfig":
        return cls()

    @property
    def is_quantized(self) -> bool:
        return self.weight is not None or self.activation is not None


class ForwardResult(NamedTuple):
    """Final output and every layer's output, in layer order."""
    output: np.ndarray
    layer_outputs: List[np.ndarray]


ConfigMap = Union[Mapping[str, LayerQuantConfig], Sequence[LayerQuantConfig]]


def apply_nonlinearity(x: np.ndarray, kind: Nonlinearity) -> np.ndarray:
    if kind is Nonlinearity.RELU:
        return np.maximum(x, 0.0)
    if kind is Nonlinearity.GELU:
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_CUBIC * x ** 3)))
    return x


def _quantized_weight(layer: LinearLayer, config: Optional[TensorQuant]) -> np.ndarray:
    if config is None:
        return layer.weight
    return fake_quant(layer.weight, config.scheme, config.scales)


def _quantized_input(layer: LinearLayer, a_in: np.ndarray, config: Optional[TensorQuant]) -> np.ndarray:
    if config is None:
        return a_in
    if config.scales is None:
        raise LayerNotCalibratedError(layer.name)
    return fake_quant(a_in, config.scheme, config.scales)


def layer_forward(layer: LinearLayer, a_in, config: Optional[LayerQuantConfig] = None) -> np.ndarray:
    """
    Run one layer, fake-quantizing what ``config`` asks for.

    Args:
        layer: Layer
        a_in: Input activations [batch, in]
        config: Quantization config; ``None`` runs in full precision

    Returns:
        Output activations [batch, out] in float64
    """
    a_in = np.asarray(a_in, dtype=np.float64)
    if a_in.ndim != 2 or a_in.shape[1] != layer.in_features:
        raise ShapeMismatchError(("batch", layer.in_features), a_in.shape,
                                 f"layer {layer.name!r} expects [batch, {layer.in_features}], got {a_in.shape}")
    weight = layer.weight
    if config is not None:
        weight = _quantized_weight(layer, config.weight)
        a_in = _quantized_input(layer, a_in, config.activation)
    out = a_in @ np.asarray(weight, dtype=np.float64).T
    return apply_nonlinearity(out, layer.nonlinearity)


def _config_list(model: ModelGraph, configs: Optional[ConfigMap]) -> List[Optional[LayerQuantConfig]]:
    if configs is None:
        return [None] * len(model.layers)
    if isinstance(configs, Mapping):
        missing = [name for name in model.layer_names if name not in configs]
        if missing:
            raise InvalidParameterError("configs", f"No quantization config for layers {missing}")
        return [configs[name] for name in model.layer_names]
    configs = list(configs)
    if len(configs) != len(model.layers):
        raise InvalidParameterError("configs", f"Expected {len(model.layers)} configs, got {len(configs)}")
    return configs


def _run(model: ModelGraph, configs: List[Optional[LayerQuantConfig]], x) -> ForwardResult:
    a = np.asarray(x, dtype=np.float64)
    outputs = []
    for layer, config in zip(model.layers, configs):
        a = layer_forward(layer, a, config)
        outputs.append(a)
    return ForwardResult(output=a, layer_outputs=outputs)


def forward_fp(model: ModelGraph, x) -> ForwardResult:
    """Reference full-precision forward pass."""
    return _run(model, _config_list(model, None), x)


def forward_quant(model: ModelGraph, configs: ConfigMap, x) -> ForwardResult:
    """
    Fake-quantized forward pass.

    Args:
        model: Model
        configs: One config per layer, by name or in layer order
        x: Input [batch, in_0]

    Returns:
        Final output and per-layer outputs

    Raises:
        LayerNotCalibratedError: If activation quantization lacks scales
    """
    return _run(model, _config_list(model, configs), x)


def layer_output_error(
    layer: LinearLayer,
    w_config: Optional[TensorQuant],
    a_config: Optional[TensorQuant],
    batches: Sequence,
    reduction: ErrorReduction = ErrorReduction.MSE,
) -> float:
    """
    Error of one layer's output under a quantization config, averaged over batches.

    Args:
        layer: Layer under test
        w_config: Weight quantization or ``None``
        a_config: Activation quantization or ``None`` (W-only)
        batches: Input-activation batches for this layer
        reduction: MSE or NSR

    Returns:
        Mean error over batches (each batch weighted equally)
    """
    if not batches:
        raise LayerNotCalibratedError(layer.name)
    config = LayerQuantConfig(weight=w_config, activation=a_config)
    errors = [
        reduce_error(layer_forward(layer, batch), layer_forward(layer, batch, config), reduction)
        for batch in batches
    ]
    return math.fsum(errors) / len(errors)


def model_output_error(
    model: ModelGraph,
    configs: ConfigMap,
    inputs: Sequence,
    reduction: ErrorReduction = ErrorReduction.MSE,
    reference: Optional[Sequence[ForwardResult]] = None,
) -> float:
    """
    Final-output error of a configured model, averaged over input batches.

    Args:
        model: Model
        configs: Per-layer quantization configs
        inputs: Model input batches
        reduction: MSE or NSR
        reference: Precomputed ``forward_fp`` results, one per input batch

    Returns:
        Mean error over batches
    """
    if not inputs:
        raise InvalidParameterError("inputs", "Need at least one input batch")
    if reference is None:
        reference = [forward_fp(model, x) for x in inputs]
    elif len(reference) != len(inputs):
        raise InvalidParameterError("reference", f"Expected {len(inputs)} reference results, got {len(reference)}")
    config_list = _config_list(model, configs)
    errors = [
        reduce_error(ref.output, _run(model, config_list, x).output, reduction)
        for ref, x in zip(reference, inputs)
    ]
    return math.fsum(errors) / len(errors)


def compare_models(
    reference: ModelGraph,
    candidate: ModelGraph,
    configs: Optional[ConfigMap],
    inputs: Sequence,
) -> Dict[ErrorReduction, float]:
    """
    Final-output MSE and NSR of a candidate model against a reference.

    Args:
        reference: Full-precision model
        candidate: Model to compare (e.g. rebuilt from a quantized bundle)
        configs: Candidate's per-layer configs, ``None`` for unquantized
        inputs: Input batches [batch, in_0]

    Returns:
        Mean error over batches per reduction

    Raises:
        ShapeMismatchError: If the two models do not have the same layer shapes
    """
    if not inputs:
        raise InvalidParameterError("inputs", "Need at least one input batch")
    ref_shapes = [layer.weight.shape for layer in reference.layers]
    cand_shapes = [layer.weight.shape for layer in candidate.layers]
    if ref_shapes != cand_shapes:
        raise ShapeMismatchError(
            (len(ref_shapes),), (len(cand_shapes),),
            f"candidate layer shapes {cand_shapes} differ from reference {ref_shapes}",
        )
    config_list = _config_list(candidate, configs)
    errors: Dict[ErrorReduction, List[float]] = {r: [] for r in ErrorReduction}
    for x in inputs:
        ref_out = forward_fp(reference, x).output
        cand_out = _run(candidate, config_list, x).output
        for reduction in ErrorReduction:
            errors[reduction].append(reduce_error(ref_out, cand_out, reduction))
    return {r: math.fsum(values) / len(values) for r, values in errors.items()}


def calibration_activations(model: ModelGraph, inputs: Sequence) -> Dict[str, List[np.ndarray]]:
    """
    Materialise every layer's input activations from reference forward passes.

    Args:
        model: Model
        inputs: Model input batches [batch, in_0]

    Returns:
        Layer name -> list of float32 input batches, in layer order
    """
    activations: Dict[str, List[np.ndarray]] = {name: [] for name in model.layer_names}
    for x in inputs:
        a_in = np.asarray(x, dtype=np.float64)
        result = forward_fp(model, a_in)
        layer_inputs = [a_in] + result.layer_outputs[:-1]
        for layer, a in zip(model.layers, layer_inputs):
            activations[layer.name].append(np.asarray(a, dtype=np.float32))
    return activations


def graph_from_quantized(bundle: QuantizedBundle) -> Tuple[ModelGraph, Dict[str, LayerQuantConfig]]:
    """
    Rebuild an evaluable model from a quantized bundle.

    Weights are replaced by their dequantized codes; activation quantization
    stays in the returned configs.
    """
    layers, configs = [], {}
    for entry in bundle.layers:
        if entry.weight_q is not None:
            weight = dequantize(entry.weight_q, dtype=np.float32)
        else:
            weight = np.asarray(entry.weight, dtype=np.float32)
        layers.append(LinearLayer(name=entry.name, weight=weight, nonlinearity=entry.nonlinearity))
        activation = None
        if entry.act_scheme is not None:
            activation = TensorQuant(scheme=entry.act_scheme, scales=entry.act_scales)
        configs[entry.name] = LayerQuantConfig(activation=activation)
    return ModelGraph(layers=layers), configs
