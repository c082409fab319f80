"""
Storage module initialization.
"""

from src.storage.bundles import (
    CalibBundle,
    InputsBundle,
    LayerSpec,
    ModelBundle,
    Nonlinearity,
    QuantizedBundle,
    QuantizedLayer,
    load_bundle,
    load_typed,
    save_bundle,
)
from src.storage.synthetic import Distribution, DistributionSpec, derive_seed, gen_synthetic

__all__ = [
    "CalibBundle",
    "InputsBundle",
    "LayerSpec",
    "ModelBundle",
    "Nonlinearity",
    "QuantizedBundle",
    "QuantizedLayer",
    "load_bundle",
    "load_typed",
    "save_bundle",
    "Distribution",
    "DistributionSpec",
    "derive_seed",
    "gen_synthetic",
]
