"""Persistence: the FQBT container, float checkpoints and calibration input.

FQBT layout (little-endian throughout)::

    offset  size  field
    0       4     magic b"FQBT"
    4       2     version (u16, currently 1)
    6       2     reserved, zero
    8       4     config block length in bytes (u32)
    12      4     number of tensors (u32)
    16      8     tensor table offset (u64)
    24      8     tensor table length (u64)
    32      8     payload offset (u64)
    40      8     payload length (u64)
    48      4     CRC32 (IEEE) of the payload bytes (u32)
    52      12    zero padding
    64      ...   config block: UTF-8 JSON, sorted keys, zero padded to 64
    ...     ...   tensor table, zero padded to 64
    ...     ...   payload

Each table entry is ``u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] |
u64 offset | u64 length`` with the offset relative to the payload start and a
multiple of 64.  Tensor bytes are row-major.  ``i4`` packs two values per
byte, first value in the low nibble; an odd count leaves the last high nibble
zero.
``i2`` packs four values per byte in the same low-bits-first order.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from .errors import (CheckpointError, ChecksumError, ContainerFormatError, DegenerateScaleError,
                     NotCalibratedError, VersionError)
from .model import (BIAS_OF, CALIBRATED_SITES, EMBED_SITE, LINEARS, FloatWeights, ModelConfig,
                    QLayer, QLinear, QuantModel, build_gelu_lut, float_oracle_forward,
                    score_requant, tensor_schema)
from .qnum import (DEFAULT_EMA_DECAY, ProductScale, QTensor, QuantSpec, RequantMul, Scale8, act_scale,
                   ema_update, quantize_bias, quantize_scale8, quantize_values,
                   requant_multiplier, weight_scale)
from .specfn import SOFTMAX_SCALE, ExpLut, LnParams, build_exp_lut

MAGIC = b"FQBT"
VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sHHIIQQQQI12x")
assert _HEADER.size == 64


class DType(IntEnum):
    I4 = 0
    I8 = 1
    U8 = 2
    I32 = 3
    SCALE8 = 4
    LNPARAM8 = 5
    F32 = 6
    REQUANT = 7
    I2 = 8


_ELEM = {DType.I8: "<i1", DType.U8: "<u1", DType.I32: "<i4", DType.LNPARAM8: "<i1",
         DType.F32: "<f4"}


def _pad(n: int) -> int:
    return (-n) % ALIGN


# ---------------------------------------------------------------------------
# nibble packing
# ---------------------------------------------------------------------------

def pack_nibbles(values) -> bytes:
    v = np.asarray(values, dtype=np.int64).reshape(-1)
    if v.size and (v.min() < -8 or v.max() > 7):
        raise ValueError("4-bit values must lie in [-8, 7]")
    u = (v & 0xF).astype(np.uint8)
    if u.size % 2:
        u = np.append(u, np.uint8(0))
    return (u[0::2] | (u[1::2] << 4)).astype(np.uint8).tobytes()


def pack_crumbs(values) -> bytes:
    """2-bit values in [-2, 1], four per byte, first value in the low bits."""
    v = np.asarray(values, dtype=np.int64).reshape(-1)
    if v.size and (v.min() < -2 or v.max() > 1):
        raise ValueError("2-bit values must lie in [-2, 1]")
    u = (v & 0x3).astype(np.uint8)
    u = np.pad(u, (0, (-u.size) % 4))
    return (u[0::4] | (u[1::4] << 2) | (u[2::4] << 4) | (u[3::4] << 6)).astype(np.uint8).tobytes()


def unpack_crumbs(blob: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(blob, dtype=np.uint8)
    if b.size != (count + 3) // 4:
        raise ContainerFormatError(f"i2 tensor needs {(count + 3) // 4} bytes, got {b.size}")
    u = np.stack([(b >> s) & 0x3 for s in (0, 2, 4, 6)], axis=-1).reshape(-1)[:count].astype(np.int64)
    return np.where(u >= 2, u - 4, u)


def unpack_nibbles(blob: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(blob, dtype=np.uint8)
    if b.size != (count + 1) // 2:
        raise ContainerFormatError(f"i4 tensor needs {(count + 1) // 2} bytes, got {b.size}")
    u = np.empty(b.size * 2, dtype=np.int64)
    u[0::2] = b & 0xF
    u[1::2] = b >> 4
    u = u[:count]
    return np.where(u >= 8, u - 16, u)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass
class Tensor:
    dtype: DType
    data: np.ndarray  # logical values; SCALE8 is (..., 2), REQUANT is (..., 2)

    @property
    def shape(self) -> tuple[int, ...]:
        if self.dtype in (DType.SCALE8, DType.REQUANT):
            return tuple(self.data.shape[:-1])
        return tuple(self.data.shape)

    def encode(self) -> bytes:
        if self.dtype is DType.I4:
            return pack_nibbles(self.data)
        if self.dtype is DType.I2:
            return pack_crumbs(self.data)
        if self.dtype is DType.SCALE8:
            d = np.asarray(self.data, np.int64).reshape(-1, 2)
            out = np.empty(d.shape, dtype=[("m", "u1"), ("e", "i1")])
            return np.rec.fromarrays([d[:, 0].astype("u1"), d[:, 1].astype("i1")],
                                     dtype=out.dtype).tobytes()
        if self.dtype is DType.REQUANT:
            return np.asarray(self.data, dtype="<i4").reshape(-1, 2).tobytes()
        return np.ascontiguousarray(self.data, dtype=_ELEM[self.dtype]).tobytes()

    @classmethod
    def decode(cls, dtype: DType, shape: tuple[int, ...], blob: bytes) -> "Tensor":
        count = int(np.prod(shape)) if shape else 1
        if dtype is DType.I4:
            return cls(dtype, unpack_nibbles(blob, count).reshape(shape))
        if dtype is DType.I2:
            return cls(dtype, unpack_crumbs(blob, count).reshape(shape))
        if dtype is DType.SCALE8:
            if len(blob) != 2 * count:
                raise ContainerFormatError("scale8 tensor length mismatch")
            raw = np.frombuffer(blob, dtype=[("m", "u1"), ("e", "i1")])
            data = np.stack([raw["m"].astype(np.int64), raw["e"].astype(np.int64)], axis=-1)
            return cls(dtype, data.reshape(*shape, 2))
        if dtype is DType.REQUANT:
            if len(blob) != 8 * count:
                raise ContainerFormatError("requant tensor length mismatch")
            return cls(dtype, np.frombuffer(blob, dtype="<i4").astype(np.int64).reshape(*shape, 2))
        np_dt = np.dtype(_ELEM[dtype])
        if len(blob) != np_dt.itemsize * count:
            raise ContainerFormatError(f"{dtype.name} tensor length mismatch")
        arr = np.frombuffer(blob, dtype=np_dt).reshape(shape)
        return cls(dtype, arr.astype(np.float32 if dtype is DType.F32 else np.int64))

    def __eq__(self, other):
        return (isinstance(other, Tensor) and self.dtype == other.dtype
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass
class FqbtContainer:
    config: dict
    tensors: dict[str, Tensor]

    def __eq__(self, other):
        return (isinstance(other, FqbtContainer) and self.config == other.config
                and list(self.tensors) == list(other.tensors)
                and all(self.tensors[k] == other.tensors[k] for k in self.tensors))

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()
        table = bytearray()
        payload = bytearray()
        for name, t in self.tensors.items():
            blob = t.encode()
            payload += b"\0" * _pad(len(payload))
            nb = name.encode()
            shape = t.shape
            table += struct.pack("<H", len(nb)) + nb
            table += struct.pack("<BB", int(t.dtype), len(shape))
            table += struct.pack(f"<{len(shape)}I", *shape)
            table += struct.pack("<QQ", len(payload), len(blob))
            payload += blob
        cfg_block = cfg + b"\0" * _pad(len(cfg))
        table_block = bytes(table) + b"\0" * _pad(len(table))
        table_off = _HEADER.size + len(cfg_block)
        payload_off = table_off + len(table_block)
        header = _HEADER.pack(MAGIC, VERSION, 0, len(cfg), len(self.tensors), table_off,
                              len(table), payload_off, len(payload),
                              zlib.crc32(payload) & 0xFFFFFFFF)
        return header + cfg_block + table_block + bytes(payload)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FqbtContainer":
        if len(buf) < _HEADER.size:
            raise ContainerFormatError("file shorter than the FQBT header")
        (magic, version, _, cfg_len, n, table_off, table_len, payload_off, payload_len,
         crc) = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise ContainerFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise VersionError(f"unsupported FQBT version {version} (expected {VERSION})")
        if payload_off % ALIGN:
            raise ContainerFormatError("payload offset not 64-byte aligned")
        if payload_off + payload_len > len(buf) or table_off + table_len > len(buf):
            raise ContainerFormatError("truncated payload")
        payload = buf[payload_off: payload_off + payload_len]
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumError("payload CRC32 mismatch")
        try:
            config = json.loads(buf[_HEADER.size: _HEADER.size + cfg_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerFormatError(f"unreadable config block: {exc}") from None
        tensors: dict[str, Tensor] = {}
        pos = table_off
        end = table_off + table_len
        try:
            for _ in range(n):
                (nlen,) = struct.unpack_from("<H", buf, pos)
                name = buf[pos + 2: pos + 2 + nlen].decode()
                pos += 2 + nlen
                dt, ndim = struct.unpack_from("<BB", buf, pos)
                pos += 2
                shape = struct.unpack_from(f"<{ndim}I", buf, pos)
                pos += 4 * ndim
                off, length = struct.unpack_from("<QQ", buf, pos)
                pos += 16
                if pos > end:
                    raise ContainerFormatError("tensor table overruns its block")
                if off % ALIGN:
                    raise ContainerFormatError(f"tensor {name!r} offset {off} misaligned")
                if off + length > payload_len:
                    raise ContainerFormatError(f"tensor {name!r} extends past the payload")
                tensors[name] = Tensor.decode(DType(dt), tuple(shape),
                                              bytes(payload[off: off + length]))
        except (struct.error, ValueError) as exc:
            if isinstance(exc, ContainerFormatError):
                raise
            raise ContainerFormatError(f"corrupt tensor table: {exc}") from None
        return cls(config, tensors)

    def byte_length(self, name: str) -> int:
        return len(self.tensors[name].encode())


def save(container: FqbtContainer, path: Union[str, Path]) -> None:
    Path(path).write_bytes(container.to_bytes())


def load(path: Union[str, Path]) -> FqbtContainer:
    return FqbtContainer.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# float checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FQCK"
CKPT_VERSION = 1


def save_float_checkpoint(fw: FloatWeights, path: Union[str, Path]) -> None:
    """Manifest (JSON) followed by ``name_len/name/ndim/dims/f32 data`` records."""
    manifest = json.dumps({"config": fw.config.to_dict(), "tensors": list(fw.tensors)},
                          sort_keys=True).encode()
    out = bytearray(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(manifest)) + manifest)
    for name, arr in fw.tensors.items():
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(bytes(out))


def read_checkpoint_config(path: Union[str, Path]) -> ModelConfig:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a float checkpoint")
    _, mlen = struct.unpack_from("<HI", buf, 4)
    return ModelConfig.from_dict(json.loads(buf[10: 10 + mlen])["config"])


def import_float_checkpoint(path: Union[str, Path], mc: Optional[ModelConfig] = None) -> FloatWeights:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a float checkpoint")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(buf[10: 10 + mlen])
    if mc is None:
        mc = ModelConfig.from_dict(manifest["config"])
    pos = 10 + mlen
    found: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2: pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
            found[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    schema = tensor_schema(mc)
    missing = [n for n in schema if n not in found]
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor(s): {', '.join(missing)}")
    for name, shape in schema.items():
        if tuple(found[name].shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: expected {shape}, found {tuple(found[name].shape)}")
    return FloatWeights(mc, {n: found[n] for n in schema})


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def read_calib_file(path: Union[str, Path]) -> list[list[int]]:
    """Newline-delimited integer token ids, one sequence per line."""
    seqs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            seqs.append([int(t) for t in line.replace(",", " ").split()])
    return seqs


def calib_stream(seqs: Iterable[Iterable[int]], mc: ModelConfig) -> Iterator[list[int]]:
    for s in seqs:
        s = list(s)
        if not s:
            raise ValueError("empty calibration sequence")
        if min(s) < 0 or max(s) >= mc.vocab_size:
            raise ValueError("calibration token id outside the vocabulary")
        yield s


def calibrate(fw: FloatWeights, stream: Iterable[Iterable[int]], decay: float = DEFAULT_EMA_DECAY,
              a_bits: Optional[int] = None) -> dict[str, QuantSpec]:
    """EMA of per-sequence max|A| at every activation site."""
    mc = fw.config
    a_bits = a_bits or mc.a_bits
    state: dict[str, float] = {}
    seen = 0
    for seq in calib_stream(stream, mc):
        maxima: dict[str, float] = {}

        def rec(site, t):
            if not site.endswith("probs"):
                maxima[site] = float(np.max(np.abs(t)))

        float_oracle_forward(seq, fw, rec)
        for site, m in maxima.items():
            state[site] = ema_update(state.get(site), m, decay)
        seen += 1
    if not seen:
        raise NotCalibratedError("not calibrated: the calibration stream is empty")
    specs = {}
    for site, ema in state.items():
        if ema <= 0:
            raise NotCalibratedError(f"not calibrated: site {site} never saw a nonzero value")
        specs[site] = QuantSpec(k=a_bits, max_clip=ema, ema_decay=decay, ema_state=ema)
    return specs


def specs_to_json(specs: dict[str, QuantSpec]) -> dict:
    return {site: {"k": s.k, "max_clip": s.max_clip, "ema_decay": s.ema_decay,
                   "ema_state": s.ema_state, "scale": act_scale(s)}
            for site, s in sorted(specs.items())}


def specs_from_json(d: dict) -> dict[str, QuantSpec]:
    return {site: QuantSpec(k=v["k"], max_clip=v["max_clip"], ema_decay=v["ema_decay"],
                            ema_state=v["ema_state"]) for site, v in d.items()}


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def _site_scale(specs: dict[str, QuantSpec], site: str) -> Scale8:
    if site not in specs:
        raise NotCalibratedError(f"not calibrated: no statistics for {site}")
    return quantize_scale8(act_scale(specs[site]))


def _quantize_weight(name: str, W: np.ndarray, k: int) -> QTensor:
    try:
        s = quantize_scale8(weight_scale(W, k))
    except DegenerateScaleError as exc:
        raise DegenerateScaleError(f"{name}: {exc}") from None
    codes = quantize_values(W, s.value(), k, float(np.abs(W).max()))
    return QTensor(codes, 4 if k <= 4 else 8, True, s)


def build_quant_model(fw: FloatWeights, specs: dict[str, QuantSpec],
                      w_bits: Optional[int] = None) -> QuantModel:
    mc = fw.config
    w_bits = w_bits or mc.w_bits
    if w_bits != mc.w_bits:
        mc = ModelConfig.from_dict({**mc.to_dict(), "w_bits": w_bits})
    s_embed = _site_scale(specs, EMBED_SITE)
    layers = []
    s_in = s_embed
    for i in range(mc.num_layers):
        p = f"layer{i}."
        scales = {s: _site_scale(specs, p + s) for s in CALIBRATED_SITES}
        linears = {}
        for wname, (src, dst) in LINEARS.items():
            s_x = s_in if src is None else scales[src]
            wq = _quantize_weight(p + wname, fw.layer(i, wname).astype(np.float64), w_bits)
            bq = quantize_bias(fw.layer(i, BIAS_OF[wname]).astype(np.float64), s_x, wq.scale)
            rm = requant_multiplier(s_x, wq.scale, scales[dst])
            linears[wname] = QLinear(wq, bq, rm, w_bits)
        layers.append(QLayer(
            linears=linears,
            score_rm=score_requant(scales["q"], scales["k"], scales["scores"], mc.head_dim),
            ctx_rm=requant_multiplier(SOFTMAX_SCALE, scales["v"], scales["ctx"]),
            ln1=LnParams.from_float(fw.layer(i, "ln1.gamma"), fw.layer(i, "ln1.beta")),
            ln2=LnParams.from_float(fw.layer(i, "ln2.gamma"), fw.layer(i, "ln2.beta")),
            scales=scales,
            exp_lut=build_exp_lut(1.0 / scales["scores"].value()),
            gelu_lut=build_gelu_lut(scales["ffn1_out"].value(), scales["gelu_out"].value()),
        ))
        s_in = scales["ln2_out"]
    host = {n: np.asarray(fw.tensors[n], dtype=np.float32) for n in fw.tensors
            if not n.startswith("layer")}
    return QuantModel(mc, w_bits, host, s_embed, specs[EMBED_SITE].max_clip, layers, dict(specs))


def quantize_model(fw: FloatWeights, specs: dict[str, QuantSpec],
                   w_bits: Optional[int] = None) -> FqbtContainer:
    return to_container(build_quant_model(fw, specs, w_bits))


def _scale_t(s: Scale8) -> Tensor:
    return Tensor(DType.SCALE8, np.array([[s.mantissa, s.exp2]], np.int64))


def _rm_t(rm: RequantMul) -> Tensor:
    return Tensor(DType.REQUANT, np.array([[rm.m, rm.shift]], np.int64))


def _ln_t(p: LnParams) -> Tensor:
    return Tensor(DType.LNPARAM8, np.stack([p.gamma, p.beta]))


def to_container(qm: QuantModel) -> FqbtContainer:
    mc = qm.config
    config = {"model": mc.to_dict(), "w_bits": qm.w_bits, "embed_clip": qm.embed_clip,
              "specs": {k: {"k": s.k, "max_clip": s.max_clip, "ema_decay": s.ema_decay,
                            "ema_state": s.ema_state} for k, s in sorted(qm.specs.items())}}
    t: dict[str, Tensor] = {}
    for name in sorted(qm.host):
        t[name] = Tensor(DType.F32, np.asarray(qm.host[name], np.float32))
    t[EMBED_SITE + ".scale"] = _scale_t(qm.embed_scale)
    wdt = DType.I2 if qm.w_bits <= 2 else DType.I4 if qm.w_bits <= 4 else DType.I8
    for i, L in enumerate(qm.layers):
        p = f"layer{i}."
        for wname, lin in L.linears.items():
            t[p + wname] = Tensor(wdt, lin.w.data)
            t[p + wname + ".scale"] = _scale_t(lin.w.scale)
            t[p + BIAS_OF[wname]] = Tensor(DType.I32, lin.b.data)
            t[p + wname + ".rm"] = _rm_t(lin.rm)
        t[p + "scores.rm"] = _rm_t(L.score_rm)
        t[p + "ctx.rm"] = _rm_t(L.ctx_rm)
        for site in CALIBRATED_SITES:
            t[p + site + ".scale"] = _scale_t(L.scales[site])
        t[p + "ln1"] = _ln_t(L.ln1)
        t[p + "ln2"] = _ln_t(L.ln2)
        t[p + "softmax_lut"] = Tensor(DType.U8, np.asarray(L.exp_lut.entries, np.int64))
        t[p + "gelu_lut"] = Tensor(DType.I8, np.asarray(L.gelu_lut, np.int64))
    return FqbtContainer(config, t)


def _need(c: FqbtContainer, name: str) -> Tensor:
    if name not in c.tensors:
        raise ContainerFormatError(f"container lacks required tensor {name!r}")
    return c.tensors[name]


def _scale_of(c: FqbtContainer, name: str) -> Scale8:
    m, e = _need(c, name).data.reshape(-1, 2)[0]
    return Scale8(int(m), int(e))


def _rm_of(c: FqbtContainer, name: str) -> RequantMul:
    m, s = _need(c, name).data.reshape(-1, 2)[0]
    return RequantMul(int(m), int(s))


def from_container(c: FqbtContainer) -> QuantModel:
    cfg = c.config
    mc = ModelConfig.from_dict(cfg["model"])
    w_bits = int(cfg["w_bits"])
    specs = {k: QuantSpec(k=v["k"], max_clip=v["max_clip"], ema_decay=v["ema_decay"],
                          ema_state=v["ema_state"]) for k, v in cfg.get("specs", {}).items()}
    host = {n: c.tensors[n].data for n in c.tensors
            if n.startswith(("embeddings.", "head."))}
    embed_scale = _scale_of(c, EMBED_SITE + ".scale")
    layers = []
    for i in range(mc.num_layers):
        p = f"layer{i}."
        scales = {s: _scale_of(c, p + s + ".scale") for s in CALIBRATED_SITES}
        linears = {}
        for wname, (src, dst) in LINEARS.items():
            s_x = (embed_scale if i == 0 else layers[i - 1].scales["ln2_out"]) \
                if src is None else scales[src]
            s_w = _scale_of(c, p + wname + ".scale")
            w = QTensor(_need(c, p + wname).data, 4 if w_bits <= 4 else 8, True, s_w)
            b = QTensor(_need(c, p + BIAS_OF[wname]).data, 32, True, ProductScale(s_x, s_w))
            linears[wname] = QLinear(w, b, _rm_of(c, p + wname + ".rm"), w_bits)
        ln = {k: LnParams(*_need(c, p + k).data) for k in ("ln1", "ln2")}
        layers.append(QLayer(
            linears=linears,
            score_rm=_rm_of(c, p + "scores.rm"),
            ctx_rm=_rm_of(c, p + "ctx.rm"),
            ln1=ln["ln1"], ln2=ln["ln2"],
            scales=scales,
            exp_lut=ExpLut(_need(c, p + "softmax_lut").data, 1.0 / scales["scores"].value()),
            gelu_lut=_need(c, p + "gelu_lut").data,
        ))
    return QuantModel(mc, w_bits, host, embed_scale, float(cfg["embed_clip"]), layers, specs)


# ---------------------------------------------------------------------------
# compression accounting
# ---------------------------------------------------------------------------

_DERIVED_TABLES = ("softmax_lut", "gelu_lut")


def compression_report(c: FqbtContainer) -> dict:
    """Float-bytes / quantized-bytes, encoder-only and including host tensors."""
    mc = ModelConfig.from_dict(c.config["model"])
    schema = tensor_schema(mc)
    enc_float = sum(4 * int(np.prod(s)) for n, s in schema.items() if n.startswith("layer"))
    host_float = sum(4 * int(np.prod(s)) for n, s in schema.items() if not n.startswith("layer"))
    enc_q = sum(c.byte_length(n) for n in c.tensors
                if n.startswith("layer") and not n.endswith(_DERIVED_TABLES))
    host_q = sum(c.byte_length(n) for n in c.tensors if not n.startswith("layer"))
    return {
        "encoder_float_bytes": enc_float,
        "encoder_quant_bytes": enc_q,
        "encoder_ratio": enc_float / enc_q,
        "full_float_bytes": enc_float + host_float,
        "full_quant_bytes": enc_q + host_q,
        "full_ratio": (enc_float + host_float) / (enc_q + host_q),
    }
