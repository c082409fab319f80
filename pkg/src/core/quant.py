"""
Symmetric max-abs quantization of tensors.

Scales are ``max|x| / max_finite(format)`` per group, where a group is the
whole tensor (per-tensor) or one slice along ``axis`` (per-channel). A group
that is all zero gets the sentinel scale 1.
"""

import logging
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.core.formats import (
    FpFormat,
    IntFormat,
    NumberFormat,
    decode_array,
    encode_array,
    max_finite,
)
from src.utils.errors import InvalidParameterError, NonFiniteInputError, ShapeMismatchError

logger = logging.getLogger(__name__)

Format = Union[IntFormat, FpFormat]


class Granularity(str, Enum):
    """Scale sharing granularity."""
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


class QuantScheme(BaseModel):
    """Format plus scale granularity."""
    model_config = ConfigDict(frozen=True)

    format: NumberFormat
    granularity: Granularity = Granularity.PER_TENSOR
    axis: int = Field(default=0, description="Channel axis for per-channel schemes")

    @classmethod
    def per_tensor(cls, fmt: Format) -> "QuantScheme":
        return cls(format=fmt, granularity=Granularity.PER_TENSOR)

    @classmethod
    def per_channel(cls, fmt: Format, axis: int = 0) -> "QuantScheme":
        return cls(format=fmt, granularity=Granularity.PER_CHANNEL, axis=axis)

    def group_shape(self, shape: Sequence[int]) -> Tuple[int, ...]:
        """Shape the scale array broadcasts to against a tensor of ``shape``."""
        if self.granularity is Granularity.PER_TENSOR:
            return (1,) * len(shape)
        axis = self.resolve_axis(len(shape))
        return tuple(shape[axis] if i == axis else 1 for i in range(len(shape)))

    def num_groups(self, shape: Sequence[int]) -> int:
        if self.granularity is Granularity.PER_TENSOR:
            return 1
        return shape[self.resolve_axis(len(shape))]

    def resolve_axis(self, rank: int) -> int:
        if not -rank <= self.axis < rank:
            raise InvalidParameterError(
                "axis", f"Per-channel axis {self.axis} is invalid for a rank-{rank} tensor"
            )
        return self.axis % rank


class ScaleSet(BaseModel):
    """Strictly positive, finite scales; one per group."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    scales: np.ndarray

    @field_validator("scales", mode="before")
    @classmethod
    def _check_scales(cls, v):
        arr = np.array(v, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise ValueError("scale set cannot be empty")
        if not np.all(np.isfinite(arr)) or not np.all(arr > 0):
            raise ValueError("scales must be strictly positive and finite")
        arr.setflags(write=False)
        return arr

    def __len__(self) -> int:
        return int(self.scales.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScaleSet):
            return NotImplemented
        return np.array_equal(self.scales, other.scales)

    __hash__ = None


class QuantizedTensor(BaseModel):
    """Integer codes plus the scheme and scales needed to dequantize them."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    codes: np.ndarray
    shape: Tuple[int, ...]
    scheme: QuantScheme
    scales: ScaleSet


def _as_tensor(t) -> np.ndarray:
    arr = np.asarray(t)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if arr.size == 0:
        raise InvalidParameterError("tensor", "Tensor cannot be empty")
    return arr


def _broadcast_scales(scales: ScaleSet, scheme: QuantScheme, shape: Sequence[int]) -> np.ndarray:
    expected = scheme.num_groups(shape)
    if len(scales) != expected:
        raise ShapeMismatchError(
            (expected,), (len(scales),),
            f"Scale set has {len(scales)} entries, scheme needs {expected}",
        )
    return scales.scales.reshape(scheme.group_shape(shape))


def _group_absmax(t: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    magnitude = np.abs(t.astype(np.float64))
    if scheme.granularity is Granularity.PER_TENSOR:
        return np.array([magnitude.max()])
    axis = scheme.resolve_axis(t.ndim)
    reduce_axes = tuple(i for i in range(t.ndim) if i != axis)
    return magnitude.max(axis=reduce_axes).reshape(-1) if reduce_axes else magnitude.reshape(-1)


def scales_from_absmax(absmax: np.ndarray, fmt: Format) -> ScaleSet:
    """Turn per-group max-abs values into scales (zero groups get scale 1)."""
    absmax = np.asarray(absmax, dtype=np.float64)
    scales = np.where(absmax > 0, absmax / max_finite(fmt), 1.0)
    return ScaleSet(scales=scales)


def compute_scales(t, scheme: QuantScheme) -> ScaleSet:
    """
    Compute max-abs scales for a tensor.

    Args:
        t: Non-empty tensor
        scheme: Quantization scheme

    Returns:
        One scale per group
    """
    arr = _as_tensor(t)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError()
    return scales_from_absmax(_group_absmax(arr, scheme), scheme.format)


def quantize(t, scheme: QuantScheme, scales: ScaleSet) -> QuantizedTensor:
    """
    Quantize a tensor to codes with round-to-nearest-even.

    Args:
        t: Tensor to quantize
        scheme: Quantization scheme
        scales: Scales valid for ``scheme`` and ``t``

    Returns:
        Quantized tensor

    Raises:
        NonFiniteInputError: If ``t`` has a non-finite element
    """
    arr = _as_tensor(t)
    scale = _broadcast_scales(scales, scheme, arr.shape)
    codes = encode_array(arr.astype(np.float64) / scale, scheme.format)
    return QuantizedTensor(codes=codes, shape=tuple(arr.shape), scheme=scheme, scales=scales)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    """Decode codes and multiply by their group scale."""
    scale = _broadcast_scales(q.scales, q.scheme, q.shape)
    values = decode_array(q.codes, q.scheme.format).reshape(q.shape) * scale
    return values.astype(dtype)


def fake_quant(t, scheme: QuantScheme, scales: Optional[ScaleSet] = None) -> np.ndarray:
    """
    Quantize then dequantize, keeping the input dtype.

    Args:
        t: Tensor
        scheme: Quantization scheme
        scales: Scales to use; computed from ``t`` when omitted

    Returns:
        Tensor of the same shape and dtype as ``t``
    """
    arr = _as_tensor(t)
    if scales is None:
        scales = compute_scales(arr, scheme)
    return dequantize(quantize(arr, scheme, scales), dtype=arr.dtype)


class Calibrator:
    """
    Streaming max-abs calibrator.

    Keeps the running per-group maximum of ``|x|`` over observed batches. A
    calibrator has a single writer; workers calibrating in parallel should
    each own one and combine them with ``merge``.
    """

    def __init__(self, scheme: QuantScheme):
        """
        Initialize calibrator.

        Args:
            scheme: Scheme whose groups are tracked. Per-channel axes refer to
                batch tensors and may not be the batch axis 0.
        """
        if scheme.granularity is Granularity.PER_CHANNEL and scheme.axis == 0:
            raise InvalidParameterError(
                "axis", "Per-channel calibration cannot group along the batch axis"
            )
        self.scheme = scheme
        self.running_max: Optional[np.ndarray] = None
        self.batch_count = 0
        self._width: Optional[Tuple[int, ...]] = None

    def observe(self, batch) -> None:
        """Fold one batch into the running maximum."""
        arr = _as_tensor(batch)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInputError()
        if self._width is None:
            self._width = tuple(arr.shape[1:])
        elif tuple(arr.shape[1:]) != self._width:
            raise ShapeMismatchError(self._width, arr.shape[1:],
                                     f"Batch width {arr.shape[1:]} differs from {self._width}")
        absmax = _group_absmax(arr, self.scheme)
        self.running_max = absmax if self.running_max is None else np.maximum(self.running_max, absmax)
        self.batch_count += 1

    def merge(self, other: "Calibrator") -> "Calibrator":
        """Combine another calibrator's statistics into this one (elementwise max)."""
        if other.scheme != self.scheme:
            raise InvalidParameterError("scheme", "Cannot merge calibrators with different schemes")
        if other.running_max is None:
            return self
        if self._width is not None and other._width != self._width:
            raise ShapeMismatchError(self._width, other._width)
        self._width = other._width
        self.running_max = (
            other.running_max.copy() if self.running_max is None
            else np.maximum(self.running_max, other.running_max)
        )
        self.batch_count += other.batch_count
        return self

    def scales(self) -> ScaleSet:
        if self.running_max is None:
            raise InvalidParameterError("batches", "Calibrator has not observed any batch")
        return scales_from_absmax(self.running_max, self.scheme.format)


def calibrate(batches: Iterable, scheme: QuantScheme) -> ScaleSet:
    """
    Derive scales from the largest magnitude seen across batches.

    Args:
        batches: One or more tensors of shape [batch, ...]
        scheme: Quantization scheme

    Returns:
        Scales equal to ``compute_scales`` on the concatenated batches

    Raises:
        InvalidParameterError: If no batch is given
    """
    calibrator = Calibrator(scheme)
    for batch in batches:
        calibrator.observe(batch)
    if calibrator.batch_count == 0:
        raise InvalidParameterError("batches", "Calibration needs at least one batch")
    logger.debug(f"Calibrated {calibrator.batch_count} batches for {scheme.format.name}")
    return calibrator.scales()
