"""
Quantization error metrics.
"""

from enum import Enum

import numpy as np

from src.utils.errors import MetricError, ShapeMismatchError


class ErrorMetricKind(str, Enum):
    """Where a candidate format's error is measured."""
    TENSOR_MSE = "tensor"
    LAYER_OUTPUT_MSE = "layer"
    MODEL_OUTPUT_MSE = "model"


class ErrorReduction(str, Enum):
    """How a reference/quantized pair is reduced to one number."""
    MSE = "mse"
    NSR = "nsr"


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape)
    return a, b


def _pairwise_sum(values: np.ndarray) -> float:
    # numpy sums a contiguous 1-D float array pairwise
    return float(np.ascontiguousarray(values).reshape(-1).sum())


def mse(a, b) -> float:
    """Mean of squared elementwise differences."""
    a, b = _pair(a, b)
    if a.size == 0:
        return 0.0
    return _pairwise_sum(np.square(a - b)) / a.size


def nsr(ref, noisy, per_row: bool = False) -> float:
    """
    Noise-signal power ratio ``sum((ref - noisy)^2) / sum(ref^2)``.

    The reference comes first; the metric is not symmetric.

    Args:
        ref: Reference tensor, not all zero
        noisy: Perturbed tensor of the same shape
        per_row: Average the ratio over rows (last axis reduced) instead of
            summing over the whole tensor

    Returns:
        Non-negative ratio

    Raises:
        MetricError: If the reference has zero power
    """
    ref, noisy = _pair(ref, noisy)
    if per_row and ref.ndim >= 2:
        rows_ref = ref.reshape(-1, ref.shape[-1])
        rows_noise = (ref - noisy).reshape(-1, ref.shape[-1])
        signal = np.square(rows_ref).sum(axis=1)
        if np.any(signal == 0):
            raise MetricError("undefined NSR")
        return _pairwise_sum(np.square(rows_noise).sum(axis=1) / signal) / signal.size

    signal = _pairwise_sum(np.square(ref))
    if signal == 0:
        raise MetricError("undefined NSR")
    return _pairwise_sum(np.square(ref - noisy)) / signal


def reduce_error(ref, quantized, reduction: ErrorReduction) -> float:
    """Apply the selected reduction to a reference/quantized pair."""
    if reduction is ErrorReduction.NSR:
        return nsr(ref, quantized)
    return mse(ref, quantized)
