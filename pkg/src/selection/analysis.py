"""
Per-layer, per-format error studies behind ``analyze``.

Three studies are available:

- ``weight``: static weight-tensor error with per-channel scales.
- ``activation``: activation error with scales calibrated on the first half
  of a layer's batches (rounded up) and applied to the held-out rest.
- ``layer``: the error ``select`` ranks candidates by, under the configured
  metric, mode and isolation policy.

Every study yields rows ``(layer, format, error, argmin)`` in model layer
order, candidates in tie-break order.
"""

import logging
import math
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.core.metrics import ErrorReduction, reduce_error
from src.core.quant import calibrate, fake_quant
from src.selection.selector import (
    CalibData,
    Format,
    SelectionConfig,
    activation_scheme,
    calib_map,
    mofq_select,
    weight_scheme,
)
from src.simulation.graph import ModelGraph
from src.utils.cache import ScaleCache
from src.utils.errors import InvalidParameterError, LayerNotCalibratedError

logger = logging.getLogger(__name__)

ANALYSIS_HEADER = ("layer", "format", "error", "argmin")

StudyRow = Tuple[str, str, float, bool]


class Study(str, Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"
    LAYER = "layer"


def mark_argmin(errors: Sequence[Tuple[str, str, float]]) -> List[StudyRow]:
    """
    Flag the first minimum-error format of every layer.

    Rows must already be grouped by layer with formats in precedence order,
    so the first strict minimum is the tie-break winner.
    """
    best: Dict[str, Tuple[str, float]] = {}
    for layer, fmt, error in errors:
        if layer not in best or error < best[layer][1]:
            best[layer] = (fmt, error)
    return [(layer, fmt, error, best[layer][0] == fmt) for layer, fmt, error in errors]


def weight_tensor_errors(model: ModelGraph, formats: Sequence[Format],
                         reduction: ErrorReduction = ErrorReduction.MSE) -> List[StudyRow]:
    """
    Weight-tensor error of every layer under every format.

    Args:
        model: Model
        formats: Candidate formats, in precedence order
        reduction: MSE or NSR

    Returns:
        Study rows in layer order
    """
    errors = []
    for layer in model.layers:
        for fmt in formats:
            quantized = fake_quant(layer.weight, weight_scheme(fmt))
            errors.append((layer.name, fmt.name, reduce_error(layer.weight, quantized, reduction)))
    logger.info(f"Weight study: {len(model.layers)} layers x {len(formats)} formats")
    return mark_argmin(errors)


def split_holdout(batches: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """First half (rounded up) calibrates; the rest is held out."""
    if len(batches) < 2:
        raise InvalidParameterError(
            "calib", f"Held-out activation analysis needs at least 2 batches, got {len(batches)}"
        )
    split = math.ceil(len(batches) / 2)
    return list(batches[:split]), list(batches[split:])


def activation_holdout_errors(model: ModelGraph, calib: CalibData, formats: Sequence[Format],
                              reduction: ErrorReduction = ErrorReduction.MSE) -> List[StudyRow]:
    """
    Activation error on held-out batches with scales from calibration batches.

    Args:
        model: Model (fixes the layer order)
        calib: Per-layer input-activation batches, at least two per layer
        formats: Candidate formats, in precedence order
        reduction: MSE or NSR

    Returns:
        Study rows in layer order; each error is the mean over held-out batches

    Raises:
        LayerNotCalibratedError: If a layer has no batches
        InvalidParameterError: If a layer has a single batch
    """
    batches_by_layer = calib_map(calib)
    errors = []
    for name in model.layer_names:
        batches = batches_by_layer.get(name)
        if not batches:
            raise LayerNotCalibratedError(name)
        calib_part, held_out = split_holdout(batches)
        for fmt in formats:
            scheme = activation_scheme(fmt)
            scales = calibrate(calib_part, scheme)
            per_batch = [reduce_error(b, fake_quant(b, scheme, scales), reduction) for b in held_out]
            errors.append((name, fmt.name, math.fsum(per_batch) / len(per_batch)))
    logger.info(f"Activation study: {len(model.layers)} layers x {len(formats)} formats")
    return mark_argmin(errors)


def layer_selection_errors(model: ModelGraph, calib: CalibData, config: SelectionConfig,
                           cache: Optional[ScaleCache] = None) -> List[StudyRow]:
    """Selection-metric error of every (layer, candidate), as ``select`` ranks them."""
    _, report = mofq_select(model, calib, config, cache)
    return [(layer, fmt, error, chosen) for layer, fmt, error, chosen in report.table_rows()]


def run_study(study: Study, model: ModelGraph, calib: CalibData, config: SelectionConfig,
              cache: Optional[ScaleCache] = None) -> List[StudyRow]:
    """
    Dispatch one study.

    Args:
        study: Which study
        model: Model
        calib: Calibration data (unused by the weight study)
        config: Candidates, reduction and, for the layer study, metric and mode
        cache: Optional scale cache

    Returns:
        Study rows
    """
    formats = config.ordered_candidates()
    if study is Study.WEIGHT:
        return weight_tensor_errors(model, formats, config.reduction)
    if study is Study.ACTIVATION:
        return activation_holdout_errors(model, calib, formats, config.reduction)
    return layer_selection_errors(model, calib, config, cache)


def chosen_by_layer(rows: Sequence[StudyRow]) -> Mapping[str, str]:
    return {layer: fmt for layer, fmt, _, argmin in rows if argmin}
