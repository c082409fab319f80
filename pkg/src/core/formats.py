"""
Bit-exact low-bit number formats.

Two families are modelled: symmetric signed integers and minifloats with a
sign bit, ``exp_bits`` exponent bits and ``man_bits`` mantissa bits. Codes are
unsigned integers below ``2 ** bits``; the sign is always the top bit of a
minifloat code and integers use two's complement.

Encoding is round-to-nearest with ties to even and saturates at the largest
finite value, so every finite input maps to a finite code.
"""

import logging
import math
import re
import threading
from enum import Enum
from typing import Annotated, List, Literal, NamedTuple, Union

import numpy as np
from cachetools import LRUCache, cached
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.utils.errors import FormatParseError, NonFiniteInputError

logger = logging.getLogger(__name__)

MAX_BITS = 8


class SpecialPolicy(str, Enum):
    """How the all-ones exponent field of a minifloat is interpreted."""
    IEEE = "ieee"
    REALLOCATED = "realloc"
    FN_SINGLE_NAN = "fn"


class ValueKind(str, Enum):
    """Decoded meaning of a code."""
    FINITE = "finite"
    ZERO = "zero"
    INF = "inf"
    NAN = "nan"
    UNUSED = "unused"


class IntFormat(BaseModel):
    """Signed symmetric integer format; the most negative code is unused."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["int"] = "int"
    bits: int = Field(..., ge=2, le=MAX_BITS, description="Total bit-width")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def is_fp(self) -> bool:
        return False

    @property
    def name(self) -> str:
        return f"int{self.bits}"


class FpFormat(BaseModel):
    """Minifloat format with subnormals and a configurable special-value policy."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["fp"] = "fp"
    exp_bits: int = Field(..., ge=1, le=MAX_BITS - 1, description="Exponent field width")
    man_bits: int = Field(..., ge=0, le=MAX_BITS - 2, description="Mantissa field width")
    exp_bias: int = Field(..., description="Exponent bias")
    special_policy: SpecialPolicy = Field(..., description="Special-value policy")

    @model_validator(mode="after")
    def _check_width(self) -> "FpFormat":
        if self.bits > MAX_BITS:
            raise ValueError(f"fp formats wider than {MAX_BITS} bits are not supported")
        if self.special_policy is SpecialPolicy.FN_SINGLE_NAN and self.exp_bits + self.man_bits < 2:
            raise ValueError("single-NaN policy needs at least two exponent/mantissa bits")
        return self

    @property
    def bits(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def is_fp(self) -> bool:
        return True

    @property
    def name(self) -> str:
        base = f"fp{self.bits}_e{self.exp_bits}m{self.man_bits}"
        if self.special_policy is not default_policy(self.exp_bits, self.man_bits):
            base += f"_{self.special_policy.value}"
        return base


NumberFormat = Annotated[Union[IntFormat, FpFormat], Field(discriminator="kind")]


class CodeValue(NamedTuple):
    """One row of a format's value table."""
    code: int
    value: float
    kind: ValueKind


def default_policy(exp_bits: int, man_bits: int) -> SpecialPolicy:
    """Special-value policy a bare ``fp<bits>_e<E>m<M>`` name resolves to."""
    if 1 + exp_bits + man_bits <= 4:
        return SpecialPolicy.REALLOCATED
    if (exp_bits, man_bits) == (4, 3):
        return SpecialPolicy.FN_SINGLE_NAN
    return SpecialPolicy.IEEE


def default_bias(exp_bits: int) -> int:
    return 2 ** (exp_bits - 1) - 1


_FP_NAME = re.compile(r"^fp(\d+)_e(\d+)m(\d+)(?:_(ieee|realloc|fn))?$")
_INT_NAME = re.compile(r"^int(\d+)$")


def parse_format(name: str) -> Union[IntFormat, FpFormat]:
    """
    Parse a canonical format name.

    Accepted grammar: ``int<bits>`` and ``fp<bits>_e<E>m<M>[_ieee|_realloc|_fn]``.

    Args:
        name: Format name, e.g. "fp4_e2m1" or "int8"

    Returns:
        Parsed format descriptor

    Raises:
        FormatParseError: If the name is unknown or inconsistent
    """
    if not isinstance(name, str) or not name.strip():
        raise FormatParseError(name, "Format name cannot be empty")
    text = name.strip().lower()

    match = _INT_NAME.match(text)
    if match:
        bits = int(match.group(1))
        if not 2 <= bits <= MAX_BITS:
            raise FormatParseError(f"int{bits}", f"Unsupported integer width in {name!r}: int{bits}")
        return IntFormat(bits=bits)

    match = _FP_NAME.match(text)
    if not match:
        raise FormatParseError(text)

    bits, exp_bits, man_bits = (int(g) for g in match.group(1, 2, 3))
    if exp_bits + man_bits + 1 != bits:
        token = f"e{exp_bits}m{man_bits}"
        raise FormatParseError(
            token, f"Inconsistent format {name!r}: 1 + {exp_bits} + {man_bits} != {bits} ({token})"
        )
    if bits > MAX_BITS or exp_bits < 1:
        raise FormatParseError(f"fp{bits}", f"Unsupported float layout in {name!r}")

    suffix = match.group(4)
    policy = SpecialPolicy(suffix) if suffix else default_policy(exp_bits, man_bits)
    try:
        return FpFormat(
            exp_bits=exp_bits,
            man_bits=man_bits,
            exp_bias=default_bias(exp_bits),
            special_policy=policy,
        )
    except ValueError as e:
        raise FormatParseError(text, f"Invalid format {name!r}: {e}")


def _decode_fp_scalar(code: int, fmt: FpFormat) -> CodeValue:
    sign_shift = fmt.exp_bits + fmt.man_bits
    sign = -1.0 if (code >> sign_shift) & 1 else 1.0
    exp_field = (code >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
    mant = code & ((1 << fmt.man_bits) - 1)
    exp_all_ones = exp_field == (1 << fmt.exp_bits) - 1
    mant_all_ones = mant == (1 << fmt.man_bits) - 1

    if exp_all_ones and fmt.special_policy is SpecialPolicy.IEEE:
        if mant == 0:
            return CodeValue(code, sign * math.inf, ValueKind.INF)
        return CodeValue(code, math.nan, ValueKind.NAN)
    if exp_all_ones and mant_all_ones and fmt.special_policy is SpecialPolicy.FN_SINGLE_NAN:
        return CodeValue(code, math.nan, ValueKind.NAN)

    if exp_field == 0:
        magnitude = math.ldexp(mant, 1 - fmt.exp_bias - fmt.man_bits)
    else:
        magnitude = math.ldexp((1 << fmt.man_bits) + mant, exp_field - fmt.exp_bias - fmt.man_bits)
    value = math.copysign(magnitude, sign)
    return CodeValue(code, value, ValueKind.ZERO if magnitude == 0 else ValueKind.FINITE)


def _decode_int_scalar(code: int, fmt: IntFormat) -> CodeValue:
    signed = code - (1 << fmt.bits) if code >> (fmt.bits - 1) else code
    if signed < -fmt.qmax:
        # Two's-complement minimum sits outside the symmetric grid; it reads as -qmax.
        return CodeValue(code, float(-fmt.qmax), ValueKind.UNUSED)
    return CodeValue(code, float(signed), ValueKind.ZERO if signed == 0 else ValueKind.FINITE)


@cached(cache=LRUCache(maxsize=64), lock=threading.Lock())
def enumerate_values(fmt: Union[IntFormat, FpFormat]) -> List[CodeValue]:
    """
    Decode every code of a format.

    Args:
        fmt: Number format

    Returns:
        All ``2 ** bits`` codes in ascending code order with their meaning
    """
    decode_one = _decode_fp_scalar if fmt.is_fp else _decode_int_scalar
    return [decode_one(code, fmt) for code in range(1 << fmt.bits)]


@cached(cache=LRUCache(maxsize=64), lock=threading.Lock())
def _decode_table(fmt: Union[IntFormat, FpFormat]) -> np.ndarray:
    table = np.array([row.value for row in enumerate_values(fmt)], dtype=np.float64)
    table.setflags(write=False)
    return table


@cached(cache=LRUCache(maxsize=64), lock=threading.Lock())
def max_finite(fmt: Union[IntFormat, FpFormat]) -> float:
    """Largest finite representable magnitude."""
    finite = [abs(row.value) for row in enumerate_values(fmt) if row.kind is ValueKind.FINITE]
    return max(finite)


def finite_values(fmt: Union[IntFormat, FpFormat]) -> np.ndarray:
    """Sorted distinct finite values (signed zero collapsed)."""
    values = {
        row.value for row in enumerate_values(fmt)
        if row.kind in (ValueKind.FINITE, ValueKind.ZERO)
    }
    return np.array(sorted(values), dtype=np.float64)


def _encode_int(x: np.ndarray, fmt: IntFormat) -> np.ndarray:
    q = np.rint(np.clip(x, -fmt.qmax, fmt.qmax)).astype(np.int64)
    return (q & ((1 << fmt.bits) - 1)).astype(np.uint8)


def _encode_fp(x: np.ndarray, fmt: FpFormat) -> np.ndarray:
    man_bits = fmt.man_bits
    min_exp = 1 - fmt.exp_bias

    magnitude = np.minimum(np.abs(x), max_finite(fmt))
    _, e = np.frexp(magnitude)
    exponent = np.maximum(e.astype(np.int32) - 1, min_exp).astype(np.int32)
    quantum = np.ldexp(1.0, exponent - man_bits)
    rounded = np.rint(magnitude / quantum) * quantum

    normal = rounded >= math.ldexp(1.0, min_exp)
    _, e_rounded = np.frexp(rounded)
    exp_rounded = e_rounded.astype(np.int32) - 1
    exp_field = np.where(normal, exp_rounded + fmt.exp_bias, 0).astype(np.int64)
    mant_scale = (np.where(normal, exp_rounded, min_exp) - man_bits).astype(np.int32)
    mant = np.ldexp(rounded, -mant_scale).astype(np.int64)
    mant = np.where(normal, mant - (1 << man_bits), mant)

    negative = (x < 0) & (rounded > 0)
    code = (negative.astype(np.int64) << (fmt.exp_bits + man_bits)) | (exp_field << man_bits) | mant
    return code.astype(np.uint8)


def encode_array(x, fmt: Union[IntFormat, FpFormat]) -> np.ndarray:
    """
    Encode an array of reals to codes with round-to-nearest-even.

    Args:
        x: Array-like of finite reals
        fmt: Target format

    Returns:
        ``uint8`` array of codes with the shape of ``x``

    Raises:
        NonFiniteInputError: If any element is NaN or infinite
    """
    values = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteInputError()
    if fmt.is_fp:
        return _encode_fp(values, fmt)
    return _encode_int(values, fmt)


def decode_array(codes, fmt: Union[IntFormat, FpFormat]) -> np.ndarray:
    """Decode an array of codes to ``float64`` values (NaN/Inf for specials)."""
    codes = np.asarray(codes)
    return _decode_table(fmt)[codes.astype(np.intp)]


def encode(x: float, fmt: Union[IntFormat, FpFormat]) -> int:
    """Encode a single real; see ``encode_array``."""
    return int(encode_array(np.float64(x), fmt))


def decode(code: int, fmt: Union[IntFormat, FpFormat]) -> float:
    """Decode a single code."""
    if not 0 <= code < (1 << fmt.bits):
        raise ValueError(f"code {code} out of range for {fmt.name}")
    return enumerate_values(fmt)[code].value


def format_value(row: CodeValue) -> str:
    """Render a decoded value the way the value tables print it ("-0", "Inf", "6", "0.5")."""
    if row.kind is ValueKind.NAN:
        return "NaN"
    if row.kind is ValueKind.UNUSED:
        return "unused"
    if row.kind is ValueKind.INF:
        return "-Inf" if row.value < 0 else "Inf"
    if row.kind is ValueKind.ZERO:
        return "-0" if math.copysign(1.0, row.value) < 0 else "0"
    if float(row.value).is_integer():
        return str(int(row.value))
    return repr(row.value)
