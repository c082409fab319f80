"""
Quantization toolkit: bit-exact INT/FP low-bit formats, RTN quantization and
per-layer mixture-of-formats selection.
"""

__version__ = "1.0.0"
