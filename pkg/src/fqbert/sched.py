"""Dataflow plan and cycle-level latency model.

Every encoder layer is a chain of stages (Q/K/V projections, QK^T, softmax,
AV, O projection, LN1, FFN1, GELU, FFN2, LN2).  Weighted stages are tiled into
sub-stages of ``tile_rows`` output rows so that one tile of weights fits one
half of the double-buffered weight buffer.  Weights stream from DRAM
continuously: while one tile and the weightless stages after it (attention
products, softmax, LN, GELU) compute, the next tile loads into the other
buffer half, so only the very first tile is exposed.

Cycle formulas (all idealized, no stalls):

* matmul sub-stage: ``ceil(rows / (N * PUs)) * ceil(in_dim / lanes) * seq``
  with ``lanes = M`` in W4 mode and ``M / 2`` in W8 mode
* softmax: ``seq * heads * (seq + lut_depth)``
* LN: ``3 * hidden / simd + hidden / simd`` (three passes plus pipeline fill)
* GELU: a LUT lookup fused into FFN1's quantization unit, ``lut_depth`` cycles
* transfer: ``weight_bytes / bandwidth``
* host I/O: one ``seq * hidden`` byte input load and one output drain

JSON field names (stable): ``config``, ``stages[]`` with ``layer``, ``name``,
``mode``, ``mac_count``, ``weight_bytes``, ``substages``, ``compute_cycles``,
``transfer_cycles``, ``overlapped_cycles``; ``totals`` with ``cycles``,
``prologue_cycles``, ``io_cycles``, ``latency_ms``, ``fps``, ``mac_count``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

from .bim import HwConfig, Mode
from .errors import PlanningError
from .model import ModelConfig

SPECIAL = "special"


@dataclass(frozen=True)
class SubStage:
    rows: int
    in_dim: int
    weight_bytes: int
    mac_count: int


@dataclass
class Stage:
    name: str
    layer: int
    mode: str  # "W4", "W8" or "special"
    mac_count: int
    weight_bytes: int
    rows: int = 0
    in_dim: int = 0
    substages: list[SubStage] = field(default_factory=list)


def weight_tile_bytes(rows: int, in_dim: int, w_bits: int) -> int:
    return math.ceil(rows * in_dim * w_bits / 8)


def default_tile_rows(rows: int, in_dim: int, w_bits: int, hw: HwConfig) -> int:
    """One PE-array pass (``N * PUs`` rows), shrunk to fit half the weight buffer.

    A single pass keeps every PE busy with the smallest buffer footprint.
    """
    cap_rows = (hw.weight_buffer_bytes * 8) // (in_dim * w_bits)
    if cap_rows < 1:
        raise PlanningError(
            f"one {in_dim}-wide weight row needs {weight_tile_bytes(1, in_dim, w_bits)} bytes; "
            f"buffer holds {hw.weight_buffer_bytes}")
    return min(rows, hw.total_pes, cap_rows)


def _matmul_stage(name, layer, rows, in_dim, seq, mode, w_bits, hw, tile_rows, weighted=True):
    tile = tile_rows if tile_rows else (
        default_tile_rows(rows, in_dim, w_bits, hw) if weighted else rows)
    if tile < 1:
        raise PlanningError("tile_rows must be >= 1")
    tile = min(tile, rows)
    if weighted:
        need = weight_tile_bytes(tile, in_dim, w_bits)
        if need > hw.weight_buffer_bytes:
            raise PlanningError(
                f"{name}: a {tile}-row tile needs {need} bytes of weight buffer, "
                f"capacity is {hw.weight_buffer_bytes} bytes per half")
    subs = []
    for r0 in range(0, rows, tile):
        r = min(tile, rows - r0)
        wb = weight_tile_bytes(r, in_dim, w_bits) if weighted else 0
        subs.append(SubStage(r, in_dim, wb, r * in_dim * seq))
    return Stage(name, layer, mode.value, sum(s.mac_count for s in subs),
                 sum(s.weight_bytes for s in subs), rows, in_dim, subs)


def _special(name, layer, weight_bytes=0):
    return Stage(name, layer, SPECIAL, 0, weight_bytes, substages=[SubStage(0, 0, weight_bytes, 0)])


def plan_dataflow(mc: ModelConfig, hw: HwConfig, tile_rows: Optional[int] = None) -> list[Stage]:
    """Stages of every encoder layer, weighted stages split into row tiles.

    ``tile_rows=None`` uses :func:`default_tile_rows` per stage.
    """
    if tile_rows is not None and tile_rows < 1:
        raise PlanningError("tile_rows must be >= 1")
    h, f, s, wb = mc.hidden, mc.ffn_dim, mc.seq_len, mc.w_bits
    wmode = Mode.W4 if wb <= 4 else Mode.W8
    stages: list[Stage] = []
    for i in range(mc.num_layers):
        for name in ("Q-proj", "K-proj", "V-proj"):
            stages.append(_matmul_stage(name, i, h, h, s, wmode, wb, hw, tile_rows))
        # activation x activation products run in W8 mode with no DRAM weights
        stages.append(_matmul_stage("QK^T", i, mc.heads * s, mc.head_dim, s, Mode.W8, 8, hw,
                                    None, weighted=False))
        stages.append(_special("softmax", i))
        stages.append(_matmul_stage("AV", i, h, s, s, Mode.W8, 8, hw, None, weighted=False))
        stages.append(_matmul_stage("O-proj", i, h, h, s, wmode, wb, hw, tile_rows))
        stages.append(_special("LN1", i, 2 * h))
        stages.append(_matmul_stage("FFN1", i, f, h, s, wmode, wb, hw, tile_rows))
        stages.append(_special("GELU", i))
        stages.append(_matmul_stage("FFN2", i, h, f, s, wmode, wb, hw, tile_rows))
        stages.append(_special("LN2", i, 2 * h))
    return stages


def model_mac_count(mc: ModelConfig) -> int:
    s, h, f = mc.seq_len, mc.hidden, mc.ffn_dim
    return mc.num_layers * (4 * s * h * h + 2 * s * s * h + 2 * s * h * f)


def substage_compute(st: Stage, sub: SubStage, hw: HwConfig, mc: ModelConfig) -> int:
    if st.mode == SPECIAL:
        if st.name == "softmax":
            return mc.seq_len * mc.heads * (mc.seq_len + hw.softmax_lut_depth)
        if st.name.startswith("LN"):
            simd = hw.ln_simd_width
            return 3 * math.ceil(mc.hidden / simd) + math.ceil(mc.hidden / simd)
        return hw.softmax_lut_depth  # GELU
    lanes = hw.bim.lanes(Mode(st.mode))
    return (math.ceil(sub.rows / hw.total_pes) * math.ceil(sub.in_dim / lanes)
            * mc.seq_len)


def transfer_cycles(nbytes: int, hw: HwConfig) -> int:
    return math.ceil(nbytes / hw.bandwidth_bytes_per_cycle)


@dataclass
class StageReport:
    layer: int
    name: str
    mode: str
    mac_count: int
    weight_bytes: int
    substages: int
    compute_cycles: int
    transfer_cycles: int
    overlapped_cycles: int


@dataclass
class PerfReport:
    config: dict
    stages: list[StageReport]
    cycles: int
    prologue_cycles: int
    io_cycles: int
    latency_ms: float
    fps: float
    mac_count: int

    def to_dict(self) -> dict:
        return {"config": self.config, "stages": [asdict(s) for s in self.stages],
                "totals": {"cycles": self.cycles, "prologue_cycles": self.prologue_cycles,
                           "io_cycles": self.io_cycles, "latency_ms": self.latency_ms,
                           "fps": self.fps, "mac_count": self.mac_count}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self, per_layer: bool = False) -> str:
        """Stage table (layer 0 only unless ``per_layer``) followed by totals."""
        rows = [s for s in self.stages if per_layer or s.layer == 0]
        hdr = f"{'layer':>5} {'stage':<8} {'mode':<7} {'subs':>4} {'macs':>12} " \
              f"{'w_bytes':>9} {'compute':>9} {'transfer':>9} {'overlap':>9}"
        lines = [hdr]
        for s in rows:
            lines.append(f"{s.layer:>5} {s.name:<8} {s.mode:<7} {s.substages:>4} "
                         f"{s.mac_count:>12} {s.weight_bytes:>9} {s.compute_cycles:>9} "
                         f"{s.transfer_cycles:>9} {s.overlapped_cycles:>9}")
        lines += [f"cycles      {self.cycles}",
                  f"prologue    {self.prologue_cycles}",
                  f"io          {self.io_cycles}",
                  f"latency_ms  {self.latency_ms:.4f}",
                  f"fps         {self.fps:.4f}",
                  f"mac_count   {self.mac_count}"]
        return "\n".join(lines) + "\n"


def hw_echo(hw: HwConfig) -> dict:
    return {"num_pus": hw.num_pus, "pes_per_pu": hw.pes_per_pu, "M": hw.bim.M,
            "variant": hw.bim.variant.value, "clock_mhz": hw.clock_mhz,
            "bandwidth_bytes_per_cycle": hw.bandwidth_bytes_per_cycle,
            "softmax_lut_depth": hw.softmax_lut_depth, "ln_simd_width": hw.ln_simd_width,
            "weight_buffer_bytes": hw.weight_buffer_bytes}


def _stream(slots, flat, compute, xfer, over, hw: HwConfig) -> int:
    """Continuous weight streaming into the two buffer halves used as one ring.

    A slot's bytes load as soon as the ring has room, its compute starts once
    they have arrived and the previous slot is done, and its bytes are freed
    when it finishes.  Fills ``over`` and ``xfer`` per sub-stage and returns
    the exposed load time before the first compute.
    """
    cap = 2 * hw.weight_buffer_bytes
    nbytes = [sum(flat[t][1].weight_bytes for t in sl) for sl in slots]
    done: list[float] = []
    load_end = 0.0
    prev_done = 0.0
    lo, held = 0, 0
    prologue = 0
    for j, sl in enumerate(slots):
        held += nbytes[j]
        while held > cap and lo < j:
            held -= nbytes[lo]
            lo += 1
        free_at = done[lo - 1] if lo else 0.0
        load_end = max(load_end, free_at) + transfer_cycles(nbytes[j], hw)
        start = max(prev_done, load_end)
        work = sum(compute[t] for t in sl)
        if j == 0:
            prologue = int(start)
        for t in sl:
            over[t] = compute[t]
            xfer[t] = 0
        xfer[sl[0]] = transfer_cycles(nbytes[j], hw)
        over[sl[0]] += int(start - prev_done) if j else 0
        prev_done = start + work
        done.append(prev_done)
    return prologue


def estimate_latency(plan: list[Stage], hw: HwConfig, mc: ModelConfig,
                     prologue: str = "global") -> PerfReport:
    """Latency of a plan with double-buffered weight streaming.

    ``prologue="global"`` streams weights continuously across stages, so
    normally only the first tile's load is exposed.  ``prologue="per_stage"`` restarts the
    stream at each stage and exposes every stage's first tile.
    """
    if prologue not in ("global", "per_stage"):
        raise ValueError(f"unknown prologue model {prologue!r}")
    flat = [(si, sub) for si, st in enumerate(plan) for sub in st.substages]
    compute = [substage_compute(plan[si], sub, hw, mc) for si, sub in flat]
    xfer = [transfer_cycles(sub.weight_bytes, hw) for _, sub in flat]
    over = [0] * len(flat)
    if prologue == "per_stage":
        exposed = 0
        for t, (si, _) in enumerate(flat):
            if t == 0 or flat[t - 1][0] != si:
                exposed += xfer[t]
            nxt = xfer[t + 1] if t + 1 < len(flat) and flat[t + 1][0] == si else 0
            over[t] = max(compute[t], nxt)
    else:
        # A slot is one weight tile plus the weightless work that follows it.
        slots: list[list[int]] = []
        for t, (si, sub) in enumerate(flat):
            if not slots or (plan[si].mode != SPECIAL and sub.weight_bytes):
                slots.append([])
            slots[-1].append(t)
        exposed = _stream(slots, flat, compute, xfer, over, hw)
    io = 2 * transfer_cycles(mc.seq_len * mc.hidden, hw)
    total = exposed + sum(over) + io
    reports = []
    for si, st in enumerate(plan):
        idx = [t for t, (sj, _) in enumerate(flat) if sj == si]
        reports.append(StageReport(st.layer, st.name, st.mode, st.mac_count, st.weight_bytes,
                                   len(st.substages), sum(compute[t] for t in idx),
                                   sum(xfer[t] for t in idx), sum(over[t] for t in idx)))
    latency_ms = total / (hw.clock_mhz * 1e3)
    return PerfReport(hw_echo(hw), reports, total, exposed, io, latency_ms, 1000.0 / latency_ms,
                      sum(st.mac_count for st in plan))


def resource_summary(hw: HwConfig, mc: Optional[ModelConfig] = None,
                     plan: Optional[list[Stage]] = None) -> dict:
    out = {"multipliers_8x4": hw.num_pus * hw.pes_per_pu * hw.bim.M,
           "bims": hw.total_pes, "pes": hw.total_pes, "pus": hw.num_pus}
    if mc is not None:
        plan = plan if plan is not None else plan_dataflow(mc, hw)
        weighted = [sub for st in plan if st.mode != SPECIAL for sub in st.substages
                    if sub.weight_bytes]
        out["weight_buffer_bytes"] = 2 * max((s.weight_bytes for s in weighted), default=0)
        out["psum_buffer_bytes"] = 2 * max((s.rows for s in weighted), default=0) * 4
        out["intermediate_buffer_bytes"] = (mc.seq_len * mc.hidden
                                            + mc.seq_len * mc.seq_len * mc.heads)
    return out


def perf(mc: ModelConfig, hw: HwConfig, tile_rows: Optional[int] = None,
         prologue: str = "global") -> PerfReport:
    return estimate_latency(plan_dataflow(mc, hw, tile_rows), hw, mc, prologue)
