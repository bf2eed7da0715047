"""Bit-split inner-product module (BIM) and the PE matrix-vector kernel.

A BIM holds ``M = 2m`` sign-configurable 8x4 multipliers feeding two
``m``-input adder trees.  In W4 mode every multiplier takes one 8-bit x 4-bit
product.  In W8 mode each 8-bit weight is split into a signed/unsigned high
nibble and an unsigned low nibble, so one 8x8 product occupies two
multipliers and the high partial products are shifted left by 4:

* Type A shifts the output of the high-nibble adder tree (inputs are
  rearranged so all high nibbles land on one tree).
* Type B shifts each high partial product before a shared tree.

Both variants compute the exact inner product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .qnum import INT32_MAX, INT32_MIN, QTensor, RequantMul, Scale8, requantize


class Mode(str, Enum):
    W4 = "W4"
    W8 = "W8"


class Variant(str, Enum):
    TYPE_A = "TypeA"
    TYPE_B = "TypeB"


@dataclass(frozen=True)
class BimConfig:
    M: int = 16
    variant: Variant = Variant.TYPE_A

    def __post_init__(self):
        if self.M < 2 or self.M % 2:
            raise ValueError(f"BIM multiplier count must be even and >= 2, got {self.M}")
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def m(self) -> int:
        return self.M // 2

    def lanes(self, mode: Mode) -> int:
        """Elements consumed per cycle."""
        return self.M if Mode(mode) is Mode.W4 else self.m


@dataclass(frozen=True)
class HwConfig:
    num_pus: int = 12
    pes_per_pu: int = 8
    bim: BimConfig = field(default_factory=BimConfig)
    clock_mhz: float = 214.0
    bandwidth_bytes_per_cycle: float = 16.0
    softmax_lut_depth: int = 3
    ln_simd_width: int = 16
    weight_buffer_bytes: int = 512 * 1024

    def __post_init__(self):
        for name in ("num_pus", "pes_per_pu", "softmax_lut_depth", "ln_simd_width",
                     "weight_buffer_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.clock_mhz > 0:
            raise ValueError("clock_mhz must be positive")
        if not self.bandwidth_bytes_per_cycle > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def total_pes(self) -> int:
        return self.num_pus * self.pes_per_pu

    @classmethod
    def make(cls, pus=12, n=8, m=16, variant="TypeA", **kw) -> "HwConfig":
        return cls(num_pus=pus, pes_per_pu=n, bim=BimConfig(m, Variant(variant)), **kw)


@dataclass(frozen=True)
class NibbleSplit:
    hi: int
    lo: int


def split8(b, signed: bool = True):
    """Split 8-bit values into (hi, lo) nibbles with ``hi * 16 + lo == b``.

    ``hi`` is an arithmetic floor (signed lane), ``lo`` is always in [0, 15].
    Works on scalars (returns NibbleSplit) or arrays (returns a tuple).
    """
    arr = np.asarray(b, dtype=np.int64)
    lo_ok, hi_ok = (-128, 127) if signed else (0, 255)
    if arr.size and (arr.min() < lo_ok or arr.max() > hi_ok):
        raise ValueError("value outside 8-bit range")
    hi = arr >> 4
    lo = arr & 0xF
    if arr.ndim == 0:
        return NibbleSplit(int(hi), int(lo))
    return hi, lo


def _check_range(x: np.ndarray, lo: int, hi: int, what: str):
    if x.size and (x.min() < lo or x.max() > hi):
        raise ValueError(f"{what} outside [{lo}, {hi}]")


def _cycle_sums(a: np.ndarray, w: np.ndarray, mode: Mode, cfg: BimConfig,
                w_signed: bool = True) -> np.ndarray:
    """One BIM cycle per trailing-axis group.

    ``a`` and ``w`` have shape (..., lanes) with ``lanes == cfg.lanes(mode)``
    (zero padded); returns the signed partial sums of shape (...).
    """
    m = cfg.m
    if mode is Mode.W4:
        prods = a * w  # M multipliers
        if cfg.variant is Variant.TYPE_A:
            return prods[..., :m].sum(-1) + prods[..., m:].sum(-1)
        # Type B: one shared tree of all M products, no shifts in W4 mode
        return prods.sum(-1)

    hi, lo = split8(w, signed=w_signed)
    p_hi = a * hi
    p_lo = a * lo
    if cfg.variant is Variant.TYPE_A:
        # rearranged inputs: tree 0 sees every high nibble, tree 1 every low
        # nibble; the shift sits on tree 0's output
        return (p_hi.sum(-1) << 4) + p_lo.sum(-1)
    # Type B: multipliers are interleaved (hi, lo) pairs; high products are
    # shifted before entering the trees
    inter = np.stack([p_hi << 4, p_lo], axis=-1).reshape(*p_hi.shape[:-1], 2 * m)
    return inter[..., :m].sum(-1) + inter[..., m:].sum(-1)


def bim_dot(a, w, mode, cfg: BimConfig, a_signed: bool = True, w_signed: bool = True):
    """Single-cycle inner product of ``a`` (8-bit) and ``w`` on one BIM.

    Accepts 1-D operands or batches with the inner product over the last axis.
    """
    mode = Mode(mode)
    a = np.asarray(a, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    if a.shape != w.shape:
        raise ValueError(f"operand shapes differ: {a.shape} vs {w.shape}")
    cap = cfg.lanes(mode)
    n = a.shape[-1] if a.ndim else 1
    if n > cap:
        raise ValueError(f"{n} elements exceed BIM capacity {cap} in {mode.value} mode; tile first")
    _check_range(a, *((-128, 127) if a_signed else (0, 255)), what="activation")
    if mode is Mode.W4:
        _check_range(w, *((-8, 7) if w_signed else (0, 15)), what="4-bit weight")
    else:
        _check_range(w, *((-128, 127) if w_signed else (0, 255)), what="8-bit weight")
    pad = [(0, 0)] * (a.ndim - 1) + [(0, cap - n)]
    out = _cycle_sums(np.pad(np.atleast_1d(a), pad), np.pad(np.atleast_1d(w), pad),
                      mode, cfg, w_signed)
    return out if np.ndim(out) else int(out)


_BLOCK_ELEMS = 1 << 22


@dataclass
class MatvecResult:
    acc: np.ndarray
    cycles: int
    saturated: bool = False


def _saturating_accumulate(partials: np.ndarray) -> tuple[np.ndarray, bool]:
    """Accumulate per-cycle partial sums along the last axis into 32 bits."""
    run = np.cumsum(partials, axis=-1)
    bad = (run < INT32_MIN) | (run > INT32_MAX)
    if not bad.any():
        return run[..., -1] if run.shape[-1] else np.zeros(run.shape[:-1], np.int64), False
    flat = partials.reshape(-1, partials.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for i, row in enumerate(flat):
        s = 0
        for p in row:
            s = min(max(s + int(p), INT32_MIN), INT32_MAX)
        out[i] = s
    return out.reshape(partials.shape[:-1]), True


def matvec_cycles(rows: int, cols: int, hw: HwConfig, mode) -> int:
    lanes = hw.bim.lanes(Mode(mode))
    return math.ceil(rows / hw.total_pes) * math.ceil(cols / lanes)


def pe_matmul(w: np.ndarray, x: np.ndarray, hw: HwConfig, mode, x_signed: bool = True,
              w_signed: bool = True) -> MatvecResult:
    """``x @ w.T`` on the PE array for a batch of input vectors.

    ``w`` is (rows, cols); ``x`` is (cols,) or (batch, cols).  Each output row
    is tiled into per-cycle chunks of BIM lane capacity and accumulated.
    """
    mode = Mode(mode)
    w = np.asarray(w, dtype=np.int64)
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    xs = x[None, :] if single else x
    rows, cols = w.shape
    if xs.shape[1] != cols:
        raise ValueError(f"matrix has {cols} columns but vector has {xs.shape[1]}")
    lanes = hw.bim.lanes(mode)
    chunks = max(1, math.ceil(cols / lanes))
    padc = chunks * lanes - cols
    wp = np.pad(w, [(0, 0), (0, padc)]).reshape(rows, chunks, lanes)
    xp = np.pad(xs, [(0, 0), (0, padc)]).reshape(xs.shape[0], 1, chunks, lanes)
    # bound the (batch, rows, chunks, lanes) intermediate
    step = max(1, _BLOCK_ELEMS // max(1, rows * chunks * lanes))
    accs, sat = [], False
    for b0 in range(0, xs.shape[0], step):
        partial = _cycle_sums(xp[b0:b0 + step], wp[None], mode, hw.bim, w_signed)
        a, s = _saturating_accumulate(partial)
        accs.append(a)
        sat |= s
    acc = np.concatenate(accs, axis=0)
    cycles = matvec_cycles(rows, cols, hw, mode) * xs.shape[0]
    return MatvecResult(acc[0] if single else acc, cycles, sat)


def pe_matvec(wq: QTensor, x: QTensor, hw: HwConfig, mode) -> MatvecResult:
    mode = Mode(mode)
    if mode is Mode.W4 and wq.bits != 4:
        raise ValueError("W4 mode needs a 4-bit weight tensor")
    if x.bits != 8:
        raise ValueError("activation operand must be 8-bit")
    return pe_matmul(wq.data, x.data, hw, mode, x_signed=x.signed, w_signed=wq.signed)


def pe_matvec_requant(wq: QTensor, x: QTensor, bias_I, rm: RequantMul, hw: HwConfig, mode,
                      out_bits: int = 8, out_scale: Optional[Scale8] = None,
                      out_signed: bool = True) -> tuple[QTensor, MatvecResult]:
    """Matrix-vector product followed by the quantization unit.

    The double-buffered Psum means requantizing tile t overlaps accumulating
    tile t+1; functionally this is the sequential composition.
    """
    res = pe_matvec(wq, x, hw, mode)
    rows = wq.shape[0]
    bias = np.zeros(rows, np.int64) if bias_I is None else np.asarray(
        getattr(bias_I, "data", bias_I), dtype=np.int64)
    if bias.shape[-1] != rows:
        raise ValueError(f"bias length {bias.shape[-1]} != rows {rows}")
    y = requantize(res.acc, bias, rm, out_bits, out_signed)
    scale = out_scale if out_scale is not None else x.scale
    return QTensor(np.asarray(y), out_bits, out_signed, scale), res
