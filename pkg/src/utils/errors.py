"""
Custom exceptions for the quantization toolkit.

Every exception carries the process exit code the CLI reports for it:
2 for argument/parse errors, 3 for data/validation errors and 4 for
algorithm failures.
"""

from typing import Any, Optional


class QuantToolkitError(Exception):
    """Base exception for all toolkit errors."""
    exit_code = 4

    def __init__(self, message="Quantization toolkit error"):
        self.message = message
        super().__init__(self.message)


class InvalidParameterError(QuantToolkitError):
    """Raised when invalid parameters are provided."""
    exit_code = 2

    def __init__(self, parameter, message=None):
        if message is None:
            message = f"Invalid parameter: {parameter}"
        self.parameter = parameter
        super().__init__(message)


class FormatParseError(InvalidParameterError):
    """Raised when a number format name cannot be parsed."""

    def __init__(self, token, message=None):
        if message is None:
            message = f"Unknown number format token: {token!r}"
        self.token = token
        super().__init__("format", message)


class DataError(QuantToolkitError):
    """Base exception for data and validation errors."""
    exit_code = 3


class NonFiniteInputError(DataError):
    """Raised when a non-finite value reaches the encoder."""

    def __init__(self, message="non-finite input"):
        super().__init__(message)


class ShapeMismatchError(DataError):
    """Raised when tensor shapes are incompatible."""

    def __init__(self, expected, actual, message=None):
        if message is None:
            message = f"Shape mismatch: expected {tuple(expected)}, got {tuple(actual)}"
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(message)


class BundleError(DataError):
    """Base exception for container format errors."""

    def __init__(self, message="Invalid bundle", path=None):
        self.path = path
        super().__init__(message)


class MissingBlobError(BundleError):
    """Raised when a manifest references a tensor blob that is absent."""

    def __init__(self, name, path=None):
        self.name = name
        super().__init__(f"missing blob {name}", path=path)


class BadMagicError(BundleError):
    """Raised when a directory is not a toolkit bundle."""

    def __init__(self, path=None, found=None):
        self.found = found
        super().__init__(f"bad magic in bundle manifest: {found!r}", path=path)


class VersionMismatchError(BundleError):
    """Raised when a manifest schema version is unsupported."""

    def __init__(self, found, expected, path=None):
        self.found = found
        self.expected = expected
        super().__init__(
            f"unsupported bundle version {found!r} (expected {expected})", path=path
        )


class ManifestShapeError(BundleError):
    """Raised when a blob size disagrees with its manifest shape."""

    def __init__(self, name, shape, nbytes, path=None):
        self.name = name
        self.shape = tuple(shape)
        self.nbytes = nbytes
        super().__init__(
            f"blob {name} holds {nbytes} bytes, manifest shape {self.shape} disagrees",
            path=path,
        )


class ModelValidationError(BundleError):
    """Raised when adjacent layers are not shape-compatible."""

    def __init__(self, first, second, message=None):
        if message is None:
            message = f"layers {first!r} and {second!r} are not shape-compatible"
        self.layers = (first, second)
        super().__init__(message)


class MetricError(QuantToolkitError):
    """Raised when a metric is undefined for its inputs."""

    def __init__(self, message="undefined NSR"):
        super().__init__(message)


class LayerNotCalibratedError(QuantToolkitError):
    """Raised when activation quantization lacks calibrated scales."""

    def __init__(self, layer=None):
        self.layer = layer
        message = f"layer not calibrated: {layer}" if layer else "layer not calibrated"
        super().__init__(message)


class SelectionError(QuantToolkitError):
    """Base exception for format selection failures.

    The partial report (layers evaluated before the failure) is attached so
    callers can still persist it.
    """

    def __init__(self, message="Format selection failed", report: Optional[Any] = None):
        self.report = report
        super().__init__(message)


class EmptyCandidatesError(SelectionError):
    """Raised when no candidate formats are given."""

    def __init__(self, report=None):
        super().__init__("empty candidate list", report=report)


class UncalibratedLayerError(SelectionError):
    """Raised when a layer has no calibration batches but needs them."""

    def __init__(self, layer, report=None):
        self.layer = layer
        super().__init__(f"layer not calibrated: {layer}", report=report)


class MetricEvaluationError(SelectionError):
    """Raised when computing a candidate's error fails."""

    def __init__(self, layer, format_name, cause, report=None):
        self.layer = layer
        self.format_name = format_name
        self.cause = cause
        super().__init__(
            f"error evaluation failed for layer {layer} with {format_name}: {cause}",
            report=report,
        )


def exit_code_for(exc: BaseException) -> int:
    """
    Map an exception to the CLI exit code.

    Args:
        exc: Raised exception

    Returns:
        2 for parse errors, 3 for data errors, 4 for algorithm failures
    """
    if isinstance(exc, QuantToolkitError):
        return exc.exit_code
    return 4
