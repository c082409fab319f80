"""
Selection module initialization.
"""

from src.selection.report import LayerSelection, SelectionReport
from src.selection.selector import (
    FormatSelector,
    IsolationPolicy,
    SelectionConfig,
    mofq_select,
    quantize_uniform,
)

__all__ = [
    "LayerSelection",
    "SelectionReport",
    "FormatSelector",
    "IsolationPolicy",
    "SelectionConfig",
    "mofq_select",
    "quantize_uniform",
]
