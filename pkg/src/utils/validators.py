"""
Validation helpers for command-line and manifest inputs.
"""

import re
from typing import List, Sequence, Union

from src.utils.errors import InvalidParameterError

_NAME = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.-]*$")
U64_MAX = (1 << 64) - 1


def validate_name(name: str) -> str:
    """
    Validate a layer or tensor name.

    Names become blob file names, so they are restricted to letters, digits,
    ``_``, ``.`` and ``-`` and may not start with a dot or dash.

    Args:
        name: Candidate name

    Returns:
        The name unchanged

    Raises:
        InvalidParameterError: If the name is unusable
    """
    if not isinstance(name, str) or not _NAME.match(name) or len(name) > 128:
        raise InvalidParameterError("name", f"Invalid tensor or layer name: {name!r}")
    return name


def validate_seed(seed: int) -> int:
    """Seeds are unsigned 64-bit integers."""
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= U64_MAX:
        raise InvalidParameterError("seed", f"Seed must be in [0, 2^64 - 1], got {seed!r}")
    return seed


def validate_bits(bits: int, allowed: Sequence[int] = (4, 8)) -> int:
    """Bit-width must be one of ``allowed``."""
    if bits not in allowed:
        raise InvalidParameterError("bits", f"Bit-width must be one of {list(allowed)}, got {bits}")
    return bits


def validate_dims(dims: Union[str, Sequence[int]]) -> List[int]:
    """
    Validate a layer width chain such as ``"16,32,8"``.

    Returns:
        At least two positive widths (input width first)
    """
    if isinstance(dims, str):
        try:
            dims = [int(d) for d in dims.split(",") if d.strip()]
        except ValueError:
            raise InvalidParameterError("dims", f"Invalid width list: {dims!r}")
    dims = list(dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise InvalidParameterError("dims", f"Need at least two positive widths, got {dims}")
    return dims


def validate_candidates(candidates: Union[str, Sequence[str]]) -> List[str]:
    """
    Split and de-duplicate a comma-separated candidate list, keeping order.

    Raises:
        InvalidParameterError: If the list is empty
    """
    if isinstance(candidates, str):
        candidates = [c.strip() for c in candidates.split(",")]
    names = []
    for name in candidates:
        if name and name not in names:
            names.append(name)
    if not names:
        raise InvalidParameterError("candidates", "Candidate list cannot be empty")
    return names


def validate_positive(value: int, parameter: str) -> int:
    if value < 1:
        raise InvalidParameterError(parameter, f"{parameter} must be positive, got {value}")
    return value
