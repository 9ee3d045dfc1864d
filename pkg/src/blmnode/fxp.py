"""Signed fixed-point arithmetic in the style of ``ac_fixed<W, I>``.

``I`` counts the sign bit, so ``fx<16,7>`` has 9 fraction bits and covers
``[-64, 64 - 2**-9]``. Values are stored as two's-complement integer codes;
``real = code * 2**-(W - I)``.

Scalar helpers (:func:`quantize`, :func:`fx_add`, :func:`fx_mul`) work on
:class:`FixedValue`. The array helpers (:func:`quantize_array`,
:func:`requantize`) are what the inference engine uses; both families share
the same rounding and overflow rules and are bit-identical.
"""
from __future__ import annotations

import enum
import math
import re
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import BadSpec, NonFinite, ParseError

MAX_TOTAL_BITS = 32
MIN_TOTAL_BITS = 4


class Rounding(enum.Enum):
    NEAREST_EVEN = "nearest_even"
    TRUNCATE = "truncate"  # toward -inf, like AC_TRN


class Overflow(enum.Enum):
    SATURATE = "saturate"
    WRAP = "wrap"


@dataclass(frozen=True)
class FixedSpec:
    total_bits: int
    integer_bits: int
    rounding: Rounding = Rounding.NEAREST_EVEN
    overflow: Overflow = Overflow.SATURATE

    def __post_init__(self):
        W, I = self.total_bits, self.integer_bits
        if not isinstance(W, (int, np.integer)) or not isinstance(I, (int, np.integer)):
            raise BadSpec(f"bit counts must be integers, got W={W!r}, I={I!r}")
        if not MIN_TOTAL_BITS <= W <= MAX_TOTAL_BITS:
            raise BadSpec(f"total_bits must be in [{MIN_TOTAL_BITS}, {MAX_TOTAL_BITS}], got {W}")
        if not 1 <= I <= W:
            raise BadSpec(f"integer_bits must be in [1, {W}], got {I}")
        object.__setattr__(self, "total_bits", int(W))
        object.__setattr__(self, "integer_bits", int(I))
        object.__setattr__(self, "rounding", Rounding(self.rounding))
        object.__setattr__(self, "overflow", Overflow(self.overflow))

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.integer_bits

    @property
    def ulp(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_code(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def min_value(self) -> float:
        return math.ldexp(self.min_code, -self.frac_bits)

    @property
    def max_value(self) -> float:
        return math.ldexp(self.max_code, -self.frac_bits)

    def with_integer_bits(self, integer_bits: int) -> "FixedSpec":
        return FixedSpec(self.total_bits, integer_bits, self.rounding, self.overflow)

    def __str__(self):
        return f"fx<{self.total_bits},{self.integer_bits}>"


def make_spec(total_bits, integer_bits, rounding=Rounding.NEAREST_EVEN,
              overflow=Overflow.SATURATE) -> FixedSpec:
    """Build a validated spec; raises :class:`BadSpec` on out-of-range widths."""
    return FixedSpec(total_bits, integer_bits, rounding, overflow)


_SPEC_RE = re.compile(r"^\s*(?:fx|ac_fixed)\s*<\s*(\d+)\s*,\s*(\d+)\s*>\s*$")


def parse_spec(text: str, rounding=Rounding.NEAREST_EVEN,
               overflow=Overflow.SATURATE) -> FixedSpec:
    """Parse ``"fx<16,7>"`` (``ac_fixed<16,7>`` is accepted too)."""
    m = _SPEC_RE.match(text)
    if not m:
        raise ParseError(f"not a fixed-point spec: {text!r}")
    return make_spec(int(m.group(1)), int(m.group(2)), rounding, overflow)


@dataclass(frozen=True)
class FixedValue:
    code: int
    spec: FixedSpec

    def __post_init__(self):
        if not self.spec.min_code <= self.code <= self.spec.max_code:
            raise ValueError(f"code {self.code} does not fit {self.spec}")

    @property
    def real(self) -> float:
        return to_real(self)


def to_real(v: FixedValue) -> float:
    return math.ldexp(v.code, -v.spec.frac_bits)


def _fit_code(code: int, spec: FixedSpec) -> tuple[int, bool]:
    lo, hi = spec.min_code, spec.max_code
    if lo <= code <= hi:
        return code, False
    if spec.overflow is Overflow.SATURATE:
        return (hi if code > hi else lo), True
    span = 1 << spec.total_bits
    return ((code - lo) % span) + lo, True


def _round_shift(value: int, shift: int, rounding: Rounding) -> int:
    """Exact ``value * 2**-shift`` rounded to an integer (``shift`` may be <= 0)."""
    if shift <= 0:
        return value << -shift
    q = value >> shift  # floor
    if rounding is Rounding.NEAREST_EVEN:
        rem = value - (q << shift)
        half = 1 << (shift - 1)
        if rem > half or (rem == half and q & 1):
            q += 1
    return q


def quantize(x: float, spec: FixedSpec) -> tuple[FixedValue, bool]:
    """Quantize a real to ``spec``; returns the value and an overflow flag."""
    x = float(x)
    if not math.isfinite(x):
        raise NonFinite(f"cannot quantize {x!r}")
    # float -> exact (numerator, 2**-shift) pair, then one rounding step
    mant, exp = math.frexp(x)
    num = int(math.ldexp(mant, 53))
    code = _round_shift(num, 53 - exp - spec.frac_bits, spec.rounding)
    code, flag = _fit_code(code, spec)
    return FixedValue(code, spec), flag


def from_code(code: int, spec: FixedSpec) -> FixedValue:
    return FixedValue(int(code), spec)


def requantize_value(v: FixedValue, spec: FixedSpec) -> tuple[FixedValue, bool]:
    code = _round_shift(v.code, v.spec.frac_bits - spec.frac_bits, spec.rounding)
    code, flag = _fit_code(code, spec)
    return FixedValue(code, spec), flag


def fx_add(a: FixedValue, b: FixedValue, out_spec: FixedSpec) -> tuple[FixedValue, bool]:
    """Exact sum at the finer of the two grids, then one re-quantization."""
    fa, fb = a.spec.frac_bits, b.spec.frac_bits
    f = max(fa, fb)
    total = (a.code << (f - fa)) + (b.code << (f - fb))
    code = _round_shift(total, f - out_spec.frac_bits, out_spec.rounding)
    code, flag = _fit_code(code, out_spec)
    return FixedValue(code, out_spec), flag


def fx_mul(a: FixedValue, b: FixedValue, out_spec: FixedSpec) -> tuple[FixedValue, bool]:
    """Exact wide product, then one re-quantization into ``out_spec``."""
    prod = a.code * b.code
    f = a.spec.frac_bits + b.spec.frac_bits
    code = _round_shift(prod, f - out_spec.frac_bits, out_spec.rounding)
    code, flag = _fit_code(code, out_spec)
    return FixedValue(code, out_spec), flag


# ---------------------------------------------------------------------------
# array forms

def quantize_array(x, spec: FixedSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`quantize`: returns ``(int64 codes, overflow mask)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFinite("array contains NaN or inf")
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = np.ldexp(x, spec.frac_bits)  # exact: power-of-two scaling
    if spec.rounding is Rounding.NEAREST_EVEN:
        r = np.rint(scaled)  # round-half-even
    else:
        r = np.floor(scaled)
    lo, hi = spec.min_code, spec.max_code
    over = (r > hi) | (r < lo)
    if spec.overflow is Overflow.SATURATE:
        codes = np.clip(r, lo, hi).astype(np.int64)
    else:
        span = float(1 << spec.total_bits)
        # r is integer valued; fmod is exact. Magnitudes >= 2**(53+W) are
        # multiples of 2**W and (after overflow to inf) wrap to zero.
        w = np.fmod(np.where(np.isfinite(r), r, 0.0) - lo, span)
        w = np.where(w < 0, w + span, w) + lo
        codes = w.astype(np.int64)
    return codes, over


def codes_to_real(codes, spec: FixedSpec) -> np.ndarray:
    return np.ldexp(np.asarray(codes, dtype=np.float64), -spec.frac_bits)


def requantize(acc, frac_in: int, spec: FixedSpec) -> tuple[np.ndarray, np.ndarray]:
    """Re-quantize integer accumulators with ``frac_in`` fraction bits.

    ``acc`` may be int64 or an object array of Python ints (for accumulators
    wider than 63 bits). Returns int64 codes and the overflow mask.
    """
    acc = np.asarray(acc)
    shift = frac_in - spec.frac_bits
    if shift <= 0:
        q = acc << (-shift)
    else:
        q = acc >> shift
        if spec.rounding is Rounding.NEAREST_EVEN:
            rem = acc - (q << shift)
            half = 1 << (shift - 1)
            up = (rem > half) | ((rem == half) & ((q & 1) == 1))
            q = q + np.asarray(up, dtype=bool).astype(q.dtype if q.dtype != object else np.int64)
    lo, hi = spec.min_code, spec.max_code
    over = np.asarray((q > hi) | (q < lo), dtype=bool)
    if spec.overflow is Overflow.SATURATE:
        q = np.minimum(np.maximum(q, lo), hi)
    else:
        q = ((q - lo) % (1 << spec.total_bits)) + lo
    return np.asarray(q).astype(np.int64), over


class OverflowLog:
    """Per-site saturation/wrap counters for one inference context."""

    def __init__(self):
        self._counts: dict[str, int] = defaultdict(int)

    def add(self, site: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError("overflow counts are non-negative")
        self._counts[site] += int(n)

    def touch(self, site: str) -> None:
        self._counts[site] += 0

    def __getitem__(self, site: str) -> int:
        return self._counts.get(site, 0)

    def __iter__(self):
        return iter(self._counts)

    def items(self):
        return self._counts.items()

    @property
    def total(self) -> int:
        return sum(self._counts.values())

    def as_dict(self) -> dict[str, int]:
        return dict(self._counts)

    def __eq__(self, other):
        if not isinstance(other, OverflowLog):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"OverflowLog({self.as_dict()!r})"
