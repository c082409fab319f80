"""
Utilities module initialization.
"""

from src.utils.errors import (
    QuantToolkitError,
    InvalidParameterError,
    FormatParseError,
    DataError,
    NonFiniteInputError,
    ShapeMismatchError,
    BundleError,
    MissingBlobError,
    BadMagicError,
    VersionMismatchError,
    ManifestShapeError,
    ModelValidationError,
    MetricError,
    LayerNotCalibratedError,
    SelectionError,
    EmptyCandidatesError,
    UncalibratedLayerError,
    MetricEvaluationError,
    exit_code_for
)

from src.utils.cache import ScaleCache

from src.utils.validators import (
    validate_name,
    validate_seed,
    validate_bits,
    validate_dims,
    validate_candidates,
    validate_positive
)

__all__ = [
    # Errors
    "QuantToolkitError",
    "InvalidParameterError",
    "FormatParseError",
    "DataError",
    "NonFiniteInputError",
    "ShapeMismatchError",
    "BundleError",
    "MissingBlobError",
    "BadMagicError",
    "VersionMismatchError",
    "ManifestShapeError",
    "ModelValidationError",
    "MetricError",
    "LayerNotCalibratedError",
    "SelectionError",
    "EmptyCandidatesError",
    "UncalibratedLayerError",
    "MetricEvaluationError",
    "exit_code_for",

    # Cache
    "ScaleCache",

    # Validators
    "validate_name",
    "validate_seed",
    "validate_bits",
    "validate_dims",
    "validate_candidates",
    "validate_positive"
]
