"""Quantization numerics: clamp/scale/round, EMA calibration, 8-bit scales,
32-bit biases and integer requantization.

Scale factors are counts-per-unit: a real value ``x`` maps to the integer
``round(x * s)`` and back to ``x_I / s``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DegenerateScaleError, NotCalibratedError

ArrayLike = Union[float, int, Sequence[float], np.ndarray]

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1
DEFAULT_EMA_DECAY = 0.99


# ---------------------------------------------------------------------------
# rounding helpers
# ---------------------------------------------------------------------------

def round_half_away(x):
    """Nearest integer, ties away from zero. Exact for every float input."""
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole  # exact in IEEE arithmetic
    out = whole + np.sign(x) * (np.abs(frac) >= 0.5)
    return out.astype(np.int64) if out.ndim else int(out)


def round_fraction(q: Fraction) -> int:
    """Half-away-from-zero rounding of an exact rational."""
    n, d = abs(q.numerator), q.denominator
    r = (2 * n + d) // (2 * d)
    return -r if q < 0 else r


def div_round_half_away(num, den):
    """Integer ``num / den`` rounded half away from zero (den > 0)."""
    num = np.asarray(num, dtype=np.int64)
    den = np.asarray(den, dtype=np.int64)
    mag = (2 * np.abs(num) + den) // (2 * den)
    out = np.where(num < 0, -mag, mag)
    return out if out.ndim else int(out)


def qrange(bits: int, signed: bool = True) -> tuple[int, int]:
    """Integer range produced by quantization at ``bits``.

    Signed ranges are symmetric; ``-2**(bits-1)`` is accepted on input but
    never produced.
    """
    if signed:
        hi = 2 ** (bits - 1) - 1
        return -hi, hi
    return 0, 2**bits - 1


def storage_range(bits: int, signed: bool = True) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


# ---------------------------------------------------------------------------
# scale types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scale8:
    """Scale factor stored as an 8-bit normalized mantissa and a power of two."""

    mantissa: int
    exp2: int

    def __post_init__(self):
        if not 128 <= self.mantissa <= 255:
            raise ValueError(f"Scale8 mantissa {self.mantissa} outside [128, 255]")

    def value(self) -> float:
        return math.ldexp(self.mantissa, self.exp2)

    def as_fraction(self) -> Fraction:
        if self.exp2 >= 0:
            return Fraction(self.mantissa << self.exp2)
        return Fraction(self.mantissa, 1 << -self.exp2)


@dataclass(frozen=True)
class ProductScale:
    """Scale of a product of two quantized operands (e.g. a 32-bit bias)."""

    a: Scale8
    b: Scale8

    def value(self) -> float:
        return self.a.value() * self.b.value()

    def as_fraction(self) -> Fraction:
        return self.a.as_fraction() * self.b.as_fraction()


@dataclass(frozen=True)
class RequantMul:
    """Fixed-point multiplier ``m * 2**-shift`` with ``m`` in [2**30, 2**31)."""

    m: int
    shift: int

    def value(self) -> float:
        return math.ldexp(self.m, -self.shift)

    def as_fraction(self) -> Fraction:
        return Fraction(self.m, 1 << self.shift)


@dataclass
class QuantSpec:
    k: int
    max_clip: float
    ema_decay: float = DEFAULT_EMA_DECAY
    ema_state: Optional[float] = None
    symmetric: bool = True
    rounding: str = "half-away-from-zero"

    def __post_init__(self):
        if not 2 <= self.k <= 8:
            raise ValueError(f"bitwidth k={self.k} outside 2..8")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay={self.ema_decay} outside (0, 1)")
        if not self.max_clip > 0:
            raise ValueError("max_clip must be positive")
        if not self.symmetric:
            raise ValueError("only symmetric quantization is supported")

    @property
    def min_clip(self) -> float:
        return -self.max_clip


@dataclass
class QTensor:
    """Integer tensor plus the metadata needed to interpret it."""

    data: np.ndarray
    bits: int
    signed: bool
    scale: Union[Scale8, ProductScale]
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.bits not in (4, 8, 32):
            raise ValueError(f"storage bits {self.bits} not in {{4, 8, 32}}")
        if self.check and self.data.size:
            lo, hi = storage_range(self.bits, self.signed)
            if self.data.min() < lo or self.data.max() > hi:
                raise ValueError(
                    f"QTensor values [{self.data.min()}, {self.data.max()}] exceed "
                    f"{'signed' if self.signed else 'unsigned'} {self.bits}-bit range"
                )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def clamp(x, lo: float, hi: float):
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    out = np.minimum(np.maximum(x, lo), hi)
    return out if np.ndim(out) else float(out)


def weight_scale(w: ArrayLike, k: int) -> float:
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise DegenerateScaleError("empty weight tensor")
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        raise DegenerateScaleError("all-zero tensor has no scale")
    return (2 ** (k - 1) - 1) / peak


def ema_update(state: Optional[float], batch_max: float, decay: float) -> float:
    if batch_max < 0:
        raise ValueError("batch_max must be non-negative")
    if state is None:
        return float(batch_max)
    return decay * state + (1.0 - decay) * batch_max


def act_scale(spec: QuantSpec) -> float:
    if spec.ema_state is None or spec.ema_state <= 0:
        raise NotCalibratedError("activation spec has no EMA statistics")
    return (2 ** (spec.k - 1) - 1) / spec.ema_state


def quantize_scale8(s: float) -> Scale8:
    if not s > 0 or not math.isfinite(s):
        raise ValueError(f"scale must be positive and finite, got {s}")
    frac, exp = math.frexp(s)  # s = frac * 2**exp, frac in [0.5, 1)
    mant = round_half_away(frac * 256.0)
    exp -= 8
    if mant == 256:
        mant, exp = 128, exp + 1
    return Scale8(int(mant), exp)


def quantize_values(x, scale: float, bits: int, max_clip: Optional[float] = None,
                    signed: bool = True):
    """Integer codes for real ``x``: clamp, multiply by ``scale``, round, saturate."""
    x = np.asarray(x, dtype=np.float64)
    if max_clip is not None:
        x = np.clip(x, -max_clip, max_clip)
    lo, hi = qrange(bits, signed)
    return round_half_away(np.clip(x * scale, lo, hi))


def quantize(x: ArrayLike, spec: QuantSpec, s: Scale8) -> QTensor:
    codes = quantize_values(x, s.value(), spec.k, spec.max_clip)
    bits = 4 if spec.k <= 4 else 8
    return QTensor(np.asarray(codes, dtype=np.int64), bits, True, s)


def dequantize(q: QTensor) -> np.ndarray:
    return q.data.astype(np.float64) / q.scale.value()


def quantize_bias(b: ArrayLike, s_a: Scale8, s_w: Scale8) -> QTensor:
    scale = ProductScale(s_a, s_w)
    t = np.atleast_1d(np.asarray(b, dtype=np.float64) * scale.value())
    # clamp before the integer cast so huge values cannot wrap
    n_sat = int(np.count_nonzero((t < INT32_MIN - 0.5) | (t >= INT32_MAX + 0.5)))
    clipped = round_half_away(np.clip(t, INT32_MIN, INT32_MAX))
    if n_sat:
        warnings.warn(f"{n_sat} bias value(s) saturated at the 32-bit rails", RuntimeWarning)
    return QTensor(clipped.reshape(np.shape(b)), 32, True, scale)


def requant_from_factor(s_f: Union[float, Fraction]) -> RequantMul:
    """Normalized 32-bit multiplier for a positive real factor."""
    if not s_f > 0:
        raise ValueError(f"requantization factor must be positive, got {s_f}")
    q = Fraction(s_f)
    # find shift with 2**30 <= q * 2**shift < 2**31
    shift = 30 - (q.numerator.bit_length() - q.denominator.bit_length())
    while q * Fraction(2) ** shift >= 2**31:
        shift -= 1
    while q * Fraction(2) ** shift < 2**30:
        shift += 1
    m = round_fraction(q * Fraction(2) ** shift)
    if m == 2**31:
        m, shift = 2**30, shift - 1
    if shift < 0:
        raise ValueError(f"factor {float(q)} too large for a non-negative shift")
    return RequantMul(int(m), int(shift))


def requant_multiplier(s_a: Scale8, s_w: Scale8, s_y: Scale8) -> RequantMul:
    return requant_from_factor(s_y.as_fraction() / (s_a.as_fraction() * s_w.as_fraction()))


def requantize(acc, bias_I, rm: RequantMul, out_bits: int, out_signed: bool = True):
    """``saturate(round((acc + bias) * m * 2**-shift))`` on a 64-bit integer path."""
    total = np.asarray(acc, dtype=np.int64) + np.asarray(bias_I, dtype=np.int64)
    prod = total * np.int64(rm.m)
    mag = np.abs(prod)
    if rm.shift == 0:
        q = mag
    elif rm.shift > 63:
        q = np.zeros_like(mag)
    else:
        q = (mag >> rm.shift) + ((mag >> (rm.shift - 1)) & 1)
    y = np.where(prod < 0, -q, q)
    lo, hi = qrange(out_bits, out_signed)
    y = np.clip(y, lo, hi)
    return y if y.ndim else int(y)
