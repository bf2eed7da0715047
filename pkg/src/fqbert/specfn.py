"""Special-function cores: LUT softmax and fixed-point layer normalization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .qnum import (QTensor, QuantSpec, Scale8, div_round_half_away, qrange,
                   round_half_away)

FX_FRAC = 16          # LN internal format Q16.16
FX_ONE = 1 << FX_FRAC
LN_PARAM_FRAC = 6     # gamma/beta format Q1.6
EPSILON_FX = FX_ONE >> 10  # 2**-10
SOFTMAX_SCALE = Scale8(128, 1)  # 256 counts per unit, unsigned Q0.8
_RSQRT_FRAC = 30


# ---------------------------------------------------------------------------
# softmax core
# ---------------------------------------------------------------------------

@dataclass
class ExpLut:
    """256-entry table of ``round(255 * exp(-i * delta))``."""

    entries: np.ndarray
    input_step: float

    def to_bytes(self) -> bytes:
        """Raw 256-byte blob, entry 0 first."""
        return np.asarray(self.entries, dtype=np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, input_step: float) -> "ExpLut":
        if len(blob) != 256:
            raise ValueError(f"LUT blob must be 256 bytes, got {len(blob)}")
        return cls(np.frombuffer(blob, dtype=np.uint8).astype(np.int64), input_step)


def build_exp_lut(delta: float) -> ExpLut:
    if not delta > 0:
        raise ValueError("LUT step must be positive")
    idx = np.arange(256, dtype=np.float64)
    entries = round_half_away(255.0 * np.exp(-idx * delta))
    return ExpLut(np.asarray(entries, dtype=np.int64), float(delta))


def lut_indices(diff, input_step: float, lut: ExpLut):
    """Map max-differences (in input quanta) to LUT indices."""
    diff = np.asarray(diff, dtype=np.int64)
    if input_step == lut.input_step:
        idx = diff
    else:
        idx = round_half_away(diff * (input_step / lut.input_step))
    return np.minimum(idx, 255)


def softmax_q(row: QTensor, lut: ExpLut) -> QTensor:
    """Softmax over the last axis of an 8-bit score tensor.

    Returns unsigned Q0.8 codes (scale 256) saturated to 255.
    """
    x = np.asarray(row.data, dtype=np.int64)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of an empty row")
    diff = x.max(axis=-1, keepdims=True) - x
    e = np.asarray(lut.entries, dtype=np.int64)[lut_indices(diff, 1.0 / row.scale.value(), lut)]
    total = e.sum(axis=-1, keepdims=True)
    out = np.minimum(div_round_half_away(256 * e, total), 255)
    return QTensor(out, 8, False, SOFTMAX_SCALE)


# ---------------------------------------------------------------------------
# fixed-point helpers
# ---------------------------------------------------------------------------

def to_fixed(codes, scale: Scale8):
    """Q16.16 representation of ``codes / scale`` (rounded half away)."""
    codes = np.asarray(codes, dtype=np.int64)
    shift = FX_FRAC - scale.exp2
    if shift >= 0:
        return div_round_half_away(codes << shift, scale.mantissa)
    return div_round_half_away(codes, scale.mantissa << -shift)


def fixed_to_codes(y_fx, scale: Scale8, bits: int = 8, signed: bool = True):
    """Quantize Q16.16 values at ``scale``: round(y * s), saturated."""
    y = np.asarray(y_fx, dtype=np.int64) * scale.mantissa
    shift = scale.exp2 - FX_FRAC
    if shift >= 0:
        out = y << shift
    else:
        out = div_round_half_away(y, np.int64(1) << -shift)
    lo, hi = qrange(bits, signed)
    return np.clip(out, lo, hi)


def rsqrt_seed(v_fx: int) -> int:
    """Initial guess for 1/sqrt(v) with ``_RSQRT_FRAC`` fractional bits.

    Power of two per octave of v, corrected by one shift-add so that the
    starting relative error stays within [-0.25, 0.25].
    """
    e = v_fx.bit_length() - 1 - FX_FRAC  # v in [2**e, 2**(e+1))
    k = e // 2
    base = _RSQRT_FRAC - k  # bit position of 2**-k
    if e % 2 == 0:
        # 0.75 * 2**-k
        return (1 << base) - (1 << (base - 2))
    # 0.625 * 2**-k
    return (1 << (base - 1)) + (1 << (base - 3))


def rsqrt_fixed(v_fx: int, iters: int = 3) -> int:
    """Q16.16 reciprocal square root via Newton-Raphson y <- y(3 - v*y^2)/2."""
    v_fx = int(v_fx)
    if v_fx <= 0:
        raise ValueError("rsqrt of a non-positive value")
    y = rsqrt_seed(v_fx)
    three = 3 << (FX_FRAC + 2 * _RSQRT_FRAC)
    for _ in range(iters):
        y = (y * (three - v_fx * y * y)) >> (FX_FRAC + 2 * _RSQRT_FRAC + 1)
    drop = _RSQRT_FRAC - FX_FRAC
    return (y + (1 << (drop - 1))) >> drop


# ---------------------------------------------------------------------------
# LN core
# ---------------------------------------------------------------------------

@dataclass
class LnParams:
    """Q1.6 gamma/beta codes (value = code / 64)."""

    gamma: np.ndarray
    beta: np.ndarray
    epsilon_fx: int = EPSILON_FX

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.int64)
        self.beta = np.asarray(self.beta, dtype=np.int64)
        if self.gamma.shape != self.beta.shape:
            raise ValueError("gamma and beta lengths differ")
        for arr in (self.gamma, self.beta):
            if arr.size and (arr.min() < -128 or arr.max() > 127):
                raise ValueError("LN parameter codes must fit signed 8 bits")

    @classmethod
    def from_float(cls, gamma, beta) -> "LnParams":
        import warnings
        g = round_half_away(np.asarray(gamma, np.float64) * (1 << LN_PARAM_FRAC))
        b = round_half_away(np.asarray(beta, np.float64) * (1 << LN_PARAM_FRAC))
        n_sat = int(np.count_nonzero((np.abs(g) > 127) | (np.abs(b) > 127)))
        if n_sat:
            warnings.warn(f"{n_sat} LN parameter(s) saturated to the Q1.6 range",
                          RuntimeWarning)
        return cls(np.clip(g, -127, 127), np.clip(b, -127, 127))

    def gamma_float(self) -> np.ndarray:
        return self.gamma / float(1 << LN_PARAM_FRAC)

    def beta_float(self) -> np.ndarray:
        return self.beta / float(1 << LN_PARAM_FRAC)


@dataclass
class LnTrace:
    """Per-stage fixed-point values of one LN evaluation (rows x n)."""

    v: np.ndarray
    mean: np.ndarray
    centered: np.ndarray
    var: np.ndarray
    rstd: np.ndarray
    out: np.ndarray


def _row_sum_sq(c: np.ndarray) -> list[int]:
    if c.size == 0 or np.abs(c).max() < (1 << 26):
        return [int(s) for s in np.einsum("ij,ij->i", c, c)]
    return [sum(int(t) * int(t) for t in row) for row in c]


def layernorm_fixed(x1: QTensor, x2: QTensor, p: LnParams, out_scale: Scale8,
                    out_bits: int = 8) -> LnTrace:
    """Three-stage fixed-point LN over the last axis; returns every stage."""
    a = np.atleast_2d(np.asarray(x1.data, dtype=np.int64))
    b = np.atleast_2d(np.asarray(x2.data, dtype=np.int64))
    if a.shape != b.shape:
        raise ValueError(f"LN inputs differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[-1]
    if n == 0:
        raise ValueError("LN over an empty vector")
    if p.gamma.shape[-1] != n:
        raise ValueError(f"LN params have length {p.gamma.shape[-1]}, input has {n}")

    # stage 1: residual sum in Q16.16 and the mean
    v = to_fixed(a, x1.scale) + to_fixed(b, x2.scale)
    mean = div_round_half_away(v.sum(axis=-1), n)
    # stage 2: centre and variance
    c = v - mean[:, None]
    den = n << FX_FRAC
    var = np.array([(2 * s + den) // (2 * den) for s in _row_sum_sq(c)], dtype=np.int64)
    rstd = np.array([rsqrt_fixed(int(s) + p.epsilon_fx) for s in var], dtype=np.int64)
    # stage 3: scale, shift, quantize
    cr = div_round_half_away(c * rstd[:, None], FX_ONE)
    gcr = div_round_half_away(p.gamma[None, :] * cr, 1 << LN_PARAM_FRAC)
    y = gcr + (p.beta[None, :] << (FX_FRAC - LN_PARAM_FRAC))
    out = fixed_to_codes(y, out_scale, out_bits)
    return LnTrace(v, mean, c, var, rstd, out)


def layernorm_q(x1: QTensor, x2: QTensor, p: LnParams, out_spec: Optional[QuantSpec],
                out_scale: Scale8) -> QTensor:
    bits = out_spec.k if out_spec is not None else 8
    tr = layernorm_fixed(x1, x2, p, out_scale, bits)
    out = tr.out if np.ndim(x1.data) > 1 else tr.out[0]
    return QTensor(out, 4 if bits <= 4 else 8, True, out_scale)
