"""
Deterministic synthetic tensors.

Random numbers come from a counter-based SplitMix64 generator: the i-th 64-bit
word of a stream with seed ``s`` is ``mix64(s + (i + 1) * 0x9E3779B97F4A7C15)``
(arithmetic modulo 2**64) where ``mix64`` is the SplitMix64 finaliser. Uniforms
in [0, 1) take the top 53 bits of a word. The output depends only on
(seed, counter), so draws are identical on every platform.

Counter layout for a tensor of ``n`` elements:
    uniform      words [0, n)
    gaussian     Box-Muller over words [0, n) and [n, 2n)
    lognormal    gaussian as above, sign from words [2n, 3n)
    student_t    Bailey's trigonometric form over words [0, n) and [n, 2n)
"""

import hashlib
import logging
import math
from enum import Enum
from typing import Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.utils.errors import InvalidParameterError

logger = logging.getLogger(__name__)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def splitmix64(seed: int, start: int, count: int) -> np.ndarray:
    """
    Return ``count`` words of the stream for ``seed`` starting at counter ``start``.

    Args:
        seed: Unsigned 64-bit seed
        start: First counter
        count: Number of words

    Returns:
        ``uint64`` array
    """
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _U64_MASK) + counters * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def uniform01(seed: int, start: int, count: int) -> np.ndarray:
    """Uniform doubles in [0, 1) with 53 random bits each."""
    words = splitmix64(seed, start, count) >> np.uint64(11)
    return words.astype(np.float64) * (2.0 ** -53)


def derive_seed(seed: int, name: str) -> int:
    """Stable 64-bit child seed for a named tensor."""
    digest = hashlib.sha256(f"{seed & _U64_MASK}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Distribution(str, Enum):
    """Supported synthetic distributions."""
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    LOGNORMAL = "lognormal"
    STUDENT_T = "student_t"


_DEFAULT_PARAMS = {
    Distribution.UNIFORM: (-1.0, 1.0),
    Distribution.GAUSSIAN: (0.0, 1.0),
    Distribution.LOGNORMAL: (0.0, 1.0),
    Distribution.STUDENT_T: (3.0,),
}


class DistributionSpec(BaseModel):
    """A distribution and its parameters, e.g. ``gaussian:0,0.05``."""
    model_config = ConfigDict(frozen=True)

    kind: Distribution
    params: Tuple[float, ...] = Field(default=(), description="Distribution parameters")

    def resolved_params(self) -> Tuple[float, ...]:
        params = self.params or _DEFAULT_PARAMS[self.kind]
        expected = len(_DEFAULT_PARAMS[self.kind])
        if len(params) != expected:
            raise InvalidParameterError(
                "distribution",
                f"{self.kind.value} takes {expected} parameter(s), got {len(params)}",
            )
        if not all(math.isfinite(p) for p in params):
            raise InvalidParameterError("distribution", "Distribution parameters must be finite")
        if self.kind is Distribution.UNIFORM and not params[0] < params[1]:
            raise InvalidParameterError("lo", "uniform needs lo < hi")
        if self.kind in (Distribution.GAUSSIAN, Distribution.LOGNORMAL) and params[1] <= 0:
            raise InvalidParameterError("sigma", f"sigma must be positive, got {params[1]}")
        if self.kind is Distribution.STUDENT_T and params[0] <= 0:
            raise InvalidParameterError("df", f"df must be positive, got {params[0]}")
        return tuple(float(p) for p in params)

    def __str__(self) -> str:
        params = ",".join(repr(p) for p in self.resolved_params())
        return f"{self.kind.value}:{params}"

    @classmethod
    def parse(cls, text: str) -> "DistributionSpec":
        """Parse ``kind[:p1,p2]``."""
        kind_text, _, param_text = text.strip().partition(":")
        try:
            kind = Distribution(kind_text.strip().lower())
        except ValueError:
            raise InvalidParameterError("distribution", f"Unknown distribution: {kind_text!r}")
        try:
            params = tuple(float(p) for p in param_text.split(",")) if param_text.strip() else ()
        except ValueError:
            raise InvalidParameterError("distribution", f"Invalid parameters in {text!r}")
        spec = cls(kind=kind, params=params)
        spec.resolved_params()
        return spec


def _gaussian(seed: int, n: int) -> np.ndarray:
    u1 = 1.0 - uniform01(seed, 0, n)
    u2 = uniform01(seed, n, n)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def gen_synthetic(spec: DistributionSpec, shape: Sequence[int], seed: int) -> np.ndarray:
    """
    Generate a reproducible ``float32`` tensor.

    Args:
        spec: Distribution spec
        shape: Positive dimensions
        seed: Unsigned 64-bit seed

    Returns:
        Row-major ``float32`` array of ``shape``

    Raises:
        InvalidParameterError: On bad parameters or shape
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise InvalidParameterError("shape", f"Shape must have positive dimensions, got {shape}")
    if not 0 <= seed <= _U64_MASK:
        raise InvalidParameterError("seed", f"Seed must be an unsigned 64-bit integer, got {seed}")
    params = spec.resolved_params()
    n = int(np.prod(shape))

    if spec.kind is Distribution.UNIFORM:
        lo, hi = params
        values = lo + (hi - lo) * uniform01(seed, 0, n)
    elif spec.kind is Distribution.GAUSSIAN:
        mu, sigma = params
        values = mu + sigma * _gaussian(seed, n)
    elif spec.kind is Distribution.LOGNORMAL:
        mu, sigma = params
        sign = np.where(uniform01(seed, 2 * n, n) < 0.5, -1.0, 1.0)
        values = sign * np.exp(mu + sigma * _gaussian(seed, n))
    else:
        (df,) = params
        u = 1.0 - uniform01(seed, 0, n)
        v = uniform01(seed, n, n)
        values = np.sqrt(df * (np.power(u, -2.0 / df) - 1.0)) * np.cos(2.0 * np.pi * v)

    out = values.astype(np.float32).reshape(shape)
    if spec.kind is Distribution.UNIFORM:
        # float32 rounding may step just outside [lo, hi]
        out = np.clip(out, np.float32(params[0]), np.float32(params[1]))
    if not np.all(np.isfinite(out)):
        raise InvalidParameterError("distribution", f"{spec} overflowed float32")
    logger.debug(f"Generated {spec} tensor of shape {shape} (seed={seed})")
    return out
