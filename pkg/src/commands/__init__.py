"""
Commands module initialization.
"""

from src.commands.data import DataCommands
from src.commands.inspect import FormatCommands
from src.commands.quantize import QuantizeCommands

__all__ = [
    "DataCommands",
    "FormatCommands",
    "QuantizeCommands"
]
