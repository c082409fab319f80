"""
Core module initialization.
"""

from src.core.formats import (
    CodeValue,
    FpFormat,
    IntFormat,
    NumberFormat,
    SpecialPolicy,
    ValueKind,
    decode,
    decode_array,
    encode,
    encode_array,
    enumerate_values,
    max_finite,
    parse_format,
)
from src.core.metrics import ErrorMetricKind, ErrorReduction, mse, nsr
from src.core.quant import (
    Calibrator,
    Granularity,
    QuantizedTensor,
    QuantScheme,
    ScaleSet,
    calibrate,
    compute_scales,
    dequantize,
    fake_quant,
    quantize,
)

__all__ = [
    # Formats
    "CodeValue",
    "FpFormat",
    "IntFormat",
    "NumberFormat",
    "SpecialPolicy",
    "ValueKind",
    "decode",
    "decode_array",
    "encode",
    "encode_array",
    "enumerate_values",
    "max_finite",
    "parse_format",

    # Metrics
    "ErrorMetricKind",
    "ErrorReduction",
    "mse",
    "nsr",

    # Quantization
    "Calibrator",
    "Granularity",
    "QuantizedTensor",
    "QuantScheme",
    "ScaleSet",
    "calibrate",
    "compute_scales",
    "dequantize",
    "fake_quant",
    "quantize",
]
