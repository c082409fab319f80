"""
Simulation module initialization.
"""

from src.simulation.graph import (
    ForwardResult,
    LayerQuantConfig,
    LinearLayer,
    ModelGraph,
    TensorQuant,
    forward_fp,
    forward_quant,
    layer_output_error,
    model_output_error,
)

__all__ = [
    "ForwardResult",
    "LayerQuantConfig",
    "LinearLayer",
    "ModelGraph",
    "TensorQuant",
    "forward_fp",
    "forward_quant",
    "layer_output_error",
    "model_output_error",
]
