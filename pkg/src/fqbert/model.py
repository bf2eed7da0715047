"""Quantized BERT network graph.

Three executions of the same encoder are provided:

* :func:`float_oracle_forward` -- plain float64 BERT, also used to collect
  calibration statistics.
* :func:`forward_int` -- the integer datapath: PE/BIM matmuls, integer
  requantization, LUT softmax, fixed-point LN and a LUT GELU.
* the real-arithmetic fake-quant engine in :mod:`fqbert.fakequant`.

Embeddings and the classifier head always run in float on the host.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .bim import HwConfig, Mode, pe_matmul
from .errors import ShapeError
from .qnum import (QTensor, QuantSpec, RequantMul, Scale8, quantize_values, qrange,
                   requant_from_factor, requantize, round_half_away)
from .specfn import ExpLut, LnParams, layernorm_fixed, softmax_q

LN_EPS = 2.0**-10
SITES = ("q", "k", "v", "scores", "probs", "ctx", "attn_out", "ln1_out",
         "ffn1_out", "gelu_out", "ffn2_out", "ln2_out")
# sites whose scale comes from calibration (probs is fixed at 256 counts/unit)
CALIBRATED_SITES = tuple(s for s in SITES if s != "probs")
EMBED_SITE = "embed.out"
LINEARS = {  # name -> (input site, output site)
    "Wq": (None, "q"), "Wk": (None, "k"), "Wv": (None, "v"),
    "Wo": ("ctx", "attn_out"), "W1": ("ln1_out", "ffn1_out"), "W2": ("gelu_out", "ffn2_out"),
}
BIAS_OF = {"Wq": "bq", "Wk": "bk", "Wv": "bv", "Wo": "bo", "W1": "b1", "W2": "b2"}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 12
    hidden: int = 768
    heads: int = 12
    ffn_dim: int = 3072
    seq_len: int = 128
    vocab_size: int = 30522
    max_position: int = 512
    type_vocab: int = 2
    num_labels: int = 2
    w_bits: int = 4
    a_bits: int = 8

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.seq_len > self.max_position:
            raise ValueError("seq_len exceeds max_position")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def bert_base(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(num_layers=2, hidden=16, heads=2, ffn_dim=32, seq_len=8,
                    vocab_size=50, max_position=16, num_labels=2)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class AblationFlags:
    quant_weights_acts: bool = True
    quant_scale: bool = True
    quant_softmax: bool = True
    quant_layernorm: bool = True

    @property
    def all_on(self) -> bool:
        return all((self.quant_weights_acts, self.quant_scale, self.quant_softmax,
                    self.quant_layernorm))

    @classmethod
    def none(cls) -> "AblationFlags":
        return cls(False, False, False, False)

    @classmethod
    def table_rows(cls) -> list[tuple[str, "AblationFlags"]]:
        """The cumulative configurations of the ablation table."""
        return [
            ("none", cls(False, False, False, False)),
            ("w/a", cls(True, False, False, False)),
            ("w/a+scale", cls(True, True, False, False)),
            ("w/a+scale+softmax", cls(True, True, True, False)),
            ("w/a+scale+softmax+layernorm", cls(True, True, True, True)),
        ]


def tensor_schema(mc: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every float tensor a checkpoint must provide."""
    h, f = mc.hidden, mc.ffn_dim
    s = {
        "embeddings.word": (mc.vocab_size, h),
        "embeddings.position": (mc.max_position, h),
        "embeddings.segment": (mc.type_vocab, h),
        "embeddings.ln.gamma": (h,),
        "embeddings.ln.beta": (h,),
    }
    for i in range(mc.num_layers):
        p = f"layer{i}."
        for w in ("Wq", "Wk", "Wv", "Wo"):
            s[p + w] = (h, h)
            s[p + BIAS_OF[w]] = (h,)
        s[p + "W1"], s[p + "b1"] = (f, h), (f,)
        s[p + "W2"], s[p + "b2"] = (h, f), (h,)
        for ln in ("ln1", "ln2"):
            s[p + ln + ".gamma"] = (h,)
            s[p + ln + ".beta"] = (h,)
    s["head.pool.W"], s["head.pool.b"] = (h, h), (h,)
    s["head.cls.W"], s["head.cls.b"] = (mc.num_labels, h), (mc.num_labels,)
    return s


def encoder_param_names(mc: ModelConfig) -> list[str]:
    return [n for n in tensor_schema(mc) if n.startswith("layer")]


@dataclass
class FloatWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.tensors[f"layer{i}.{name}"]


# ---------------------------------------------------------------------------
# host side (float)
# ---------------------------------------------------------------------------

def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_codes(u_codes, s_in: float, s_out: float, bits: int = 8):
    """Quantized GELU of quantized inputs; also used to fill the GELU LUT."""
    u = np.asarray(u_codes, dtype=np.float64) / s_in
    lo, hi = qrange(bits)
    return np.clip(round_half_away(gelu(u) * s_out), lo, hi)


def build_gelu_lut(s_in: float, s_out: float) -> np.ndarray:
    """256 output codes indexed by ``input_code + 128``."""
    return np.asarray(gelu_codes(np.arange(-128, 128), s_in, s_out), dtype=np.int64)


def layer_norm_float(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def softmax_float(x) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _check_ids(token_ids, mc: ModelConfig) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ShapeError("empty token sequence")
    if ids.size > mc.max_position:
        raise ShapeError(f"sequence of {ids.size} tokens exceeds max_position {mc.max_position}")
    if ids.min() < 0 or ids.max() >= mc.vocab_size:
        raise ShapeError("token id outside vocabulary")
    return ids


def host_embed(emb: dict[str, np.ndarray], token_ids, mc: ModelConfig) -> np.ndarray:
    ids = _check_ids(token_ids, mc)
    x = (emb["embeddings.word"][ids].astype(np.float64)
         + emb["embeddings.position"][: ids.size].astype(np.float64)
         + emb["embeddings.segment"][0].astype(np.float64))
    return layer_norm_float(x, emb["embeddings.ln.gamma"].astype(np.float64),
                            emb["embeddings.ln.beta"].astype(np.float64))


def host_head(head: dict[str, np.ndarray], first_token: np.ndarray) -> np.ndarray:
    pooled = np.tanh(head["head.pool.W"].astype(np.float64) @ first_token
                     + head["head.pool.b"].astype(np.float64))
    return head["head.cls.W"].astype(np.float64) @ pooled + head["head.cls.b"].astype(np.float64)


# ---------------------------------------------------------------------------
# float oracle
# ---------------------------------------------------------------------------

Recorder = Callable[[str, np.ndarray], None]


def float_oracle_forward(token_ids, fw: FloatWeights, record: Optional[Recorder] = None) -> np.ndarray:
    """Reference float BERT; ``record(site, tensor)`` sees every activation site."""
    mc = fw.config
    rec = record or (lambda site, t: None)
    t = {k: v.astype(np.float64) for k, v in fw.tensors.items()}
    x = host_embed(fw.tensors, token_ids, mc)
    rec(EMBED_SITE, x)
    dh = mc.head_dim
    for i in range(mc.num_layers):
        p = f"layer{i}."
        q = x @ t[p + "Wq"].T + t[p + "bq"]
        k = x @ t[p + "Wk"].T + t[p + "bk"]
        v = x @ t[p + "Wv"].T + t[p + "bv"]
        for name, val in (("q", q), ("k", k), ("v", v)):
            rec(p + name, val)
        ctx = np.empty_like(q)
        scores_all, probs_all = [], []
        for h in range(mc.heads):
            sl = slice(h * dh, (h + 1) * dh)
            sc = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            pr = softmax_float(sc)
            ctx[:, sl] = pr @ v[:, sl]
            scores_all.append(sc)
            probs_all.append(pr)
        rec(p + "scores", np.stack(scores_all))
        rec(p + "probs", np.stack(probs_all))
        rec(p + "ctx", ctx)
        attn = ctx @ t[p + "Wo"].T + t[p + "bo"]
        rec(p + "attn_out", attn)
        u = layer_norm_float(attn + x, t[p + "ln1.gamma"], t[p + "ln1.beta"])
        rec(p + "ln1_out", u)
        f1 = u @ t[p + "W1"].T + t[p + "b1"]
        rec(p + "ffn1_out", f1)
        g = gelu(f1)
        rec(p + "gelu_out", g)
        f2 = g @ t[p + "W2"].T + t[p + "b2"]
        rec(p + "ffn2_out", f2)
        x = layer_norm_float(f2 + u, t[p + "ln2.gamma"], t[p + "ln2.beta"])
        rec(p + "ln2_out", x)
    return host_head(fw.tensors, x[0])


# ---------------------------------------------------------------------------
# quantized parameters
# ---------------------------------------------------------------------------

@dataclass
class QLinear:
    w: QTensor
    b: QTensor
    rm: RequantMul
    w_bits: int

    @property
    def mode(self) -> Mode:
        return Mode.W4 if self.w_bits <= 4 else Mode.W8


@dataclass
class QLayer:
    linears: dict[str, QLinear]
    score_rm: RequantMul
    ctx_rm: RequantMul
    ln1: LnParams
    ln2: LnParams
    scales: dict[str, Scale8]
    exp_lut: ExpLut
    gelu_lut: np.ndarray


@dataclass
class QuantModel:
    """Everything the accelerator and host need for quantized inference."""

    config: ModelConfig
    w_bits: int
    host: dict[str, np.ndarray]       # float embeddings and head tensors
    embed_scale: Scale8
    embed_clip: float
    layers: list[QLayer]
    specs: dict[str, QuantSpec] = field(default_factory=dict)

    def input_scale(self, i: int) -> Scale8:
        return self.embed_scale if i == 0 else self.layers[i - 1].scales["ln2_out"]


def score_requant(s_q: Scale8, s_k: Scale8, s_s: Scale8, head_dim: int) -> RequantMul:
    """Requantization of Q.K^T with the 1/sqrt(d_k) attention scaling folded in."""
    base = s_s.as_fraction() / (s_q.as_fraction() * s_k.as_fraction())
    r = math.isqrt(head_dim)
    if r * r == head_dim:
        return requant_from_factor(base / r)
    return requant_from_factor(float(base) / math.sqrt(head_dim))


def quantize_input(x_float: np.ndarray, qm: QuantModel) -> np.ndarray:
    """Host-side 8-bit quantization of the embedding output."""
    return np.asarray(quantize_values(x_float, qm.embed_scale.value(), qm.config.a_bits,
                                      qm.embed_clip), dtype=np.int64)


# ---------------------------------------------------------------------------
# integer engine
# ---------------------------------------------------------------------------

class AccumulatorOverflow(RuntimeWarning):
    pass


@dataclass
class IntStats:
    cycles: int = 0
    saturated: list = field(default_factory=list)


def _int_linear(lin: QLinear, x: np.ndarray, hw: HwConfig, stats: IntStats, site: str,
                out_bits: int) -> np.ndarray:
    res = pe_matmul(lin.w.data, x, hw, lin.mode)
    stats.cycles += res.cycles
    if res.saturated:
        stats.saturated.append(site)
    return np.asarray(requantize(res.acc, lin.b.data, lin.rm, out_bits), dtype=np.int64)


def mha_forward_int(x: np.ndarray, L: QLayer, mc: ModelConfig, hw: HwConfig, stats: IntStats,
                    trace: Optional[dict] = None, prefix: str = "") -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != mc.hidden:
        raise ShapeError(f"attention input shape {x.shape} != (seq, {mc.hidden})")
    ab = mc.a_bits
    q = _int_linear(L.linears["Wq"], x, hw, stats, prefix + "q", ab)
    k = _int_linear(L.linears["Wk"], x, hw, stats, prefix + "k", ab)
    v = _int_linear(L.linears["Wv"], x, hw, stats, prefix + "v", ab)
    dh = mc.head_dim
    seq = x.shape[0]
    scores = np.empty((mc.heads, seq, seq), np.int64)
    probs = np.empty((mc.heads, seq, seq), np.int64)
    ctx = np.empty_like(q)
    for h in range(mc.heads):
        sl = slice(h * dh, (h + 1) * dh)
        r = pe_matmul(k[:, sl], q[:, sl], hw, Mode.W8)
        stats.cycles += r.cycles
        scores[h] = requantize(r.acc, 0, L.score_rm, ab)
        probs[h] = softmax_q(QTensor(scores[h], 8, True, L.scales["scores"], check=False),
                             L.exp_lut).data
        r = pe_matmul(v[:, sl].T, probs[h], hw, Mode.W8, x_signed=False)
        stats.cycles += r.cycles
        if r.saturated:
            stats.saturated.append(prefix + "ctx")
        ctx[:, sl] = requantize(r.acc, 0, L.ctx_rm, ab)
    attn = _int_linear(L.linears["Wo"], ctx, hw, stats, prefix + "attn_out", ab)
    if trace is not None:
        trace.update({prefix + "q": q, prefix + "k": k, prefix + "v": v,
                      prefix + "scores": scores, prefix + "probs": probs,
                      prefix + "ctx": ctx, prefix + "attn_out": attn})
    return attn


def ffn_forward_int(u: np.ndarray, L: QLayer, mc: ModelConfig, hw: HwConfig, stats: IntStats,
                    trace: Optional[dict] = None, prefix: str = "") -> np.ndarray:
    f1 = _int_linear(L.linears["W1"], u, hw, stats, prefix + "ffn1_out", mc.a_bits)
    g = L.gelu_lut[f1 + 128]
    f2 = _int_linear(L.linears["W2"], g, hw, stats, prefix + "ffn2_out", mc.a_bits)
    if trace is not None:
        trace.update({prefix + "ffn1_out": f1, prefix + "gelu_out": g, prefix + "ffn2_out": f2})
    return f2


def encoder_layer_int(x: np.ndarray, qm: QuantModel, i: int, hw: HwConfig, stats: IntStats,
                      trace: Optional[dict] = None) -> np.ndarray:
    L = qm.layers[i]
    mc = qm.config
    p = f"layer{i}."
    s_in = qm.input_scale(i)
    attn = mha_forward_int(x, L, mc, hw, stats, trace, p)
    u = layernorm_fixed(QTensor(attn, 8, True, L.scales["attn_out"], check=False),
                        QTensor(x, 8, True, s_in, check=False), L.ln1,
                        L.scales["ln1_out"], mc.a_bits).out
    f2 = ffn_forward_int(u, L, mc, hw, stats, trace, p)
    out = layernorm_fixed(QTensor(f2, 8, True, L.scales["ffn2_out"], check=False),
                          QTensor(u, 8, True, L.scales["ln1_out"], check=False), L.ln2,
                          L.scales["ln2_out"], mc.a_bits).out
    if trace is not None:
        trace[p + "ln1_out"] = u
        trace[p + "ln2_out"] = out
    return out


def forward_int(token_ids, qm: QuantModel, hw: Optional[HwConfig] = None,
                trace: Optional[dict] = None, stats: Optional[IntStats] = None) -> np.ndarray:
    """Integer-only encoder between float host embedding and float head."""
    import warnings

    hw = hw or HwConfig()
    stats = stats if stats is not None else IntStats()
    mc = qm.config
    emb = host_embed(qm.host, token_ids, mc)
    if mc.num_layers == 0:
        return host_head(qm.host, emb[0])  # nothing crosses to the accelerator
    x = quantize_input(emb, qm)
    if trace is not None:
        trace[EMBED_SITE] = x
    for i in range(mc.num_layers):
        x = encoder_layer_int(x, qm, i, hw, stats, trace)
    if stats.saturated:
        warnings.warn(f"accumulator saturated at {sorted(set(stats.saturated))}",
                      AccumulatorOverflow)
    s_out = qm.input_scale(mc.num_layers)
    return host_head(qm.host, x[0].astype(np.float64) / s_out.value())


def model_forward(token_ids, qm: QuantModel, hw: Optional[HwConfig] = None,
                  flags: AblationFlags = AblationFlags(), floats: Optional[FloatWeights] = None,
                  trace: Optional[dict] = None) -> np.ndarray:
    """Run inference; fully quantized flags use the integer datapath.

    Partially quantized ablation rows run on the real-arithmetic engine and
    need the float weights.
    """
    if flags.all_on:
        return forward_int(token_ids, qm, hw, trace)
    from .fakequant import forward_real
    return forward_real(token_ids, qm, flags, floats=floats, trace=trace)


def fake_quant_forward(token_ids, qm: QuantModel, trace: Optional[dict] = None) -> np.ndarray:
    from .fakequant import forward_real
    return forward_real(token_ids, qm, AblationFlags(), trace=trace)


def quantized_site_count(flags: AblationFlags, mc: ModelConfig) -> int:
    """How many tensor sites are held in a quantized format under ``flags``."""
    per_layer = 0
    if flags.quant_weights_acts:
        # weights, biases and every 8-bit activation site except probs
        per_layer += 2 * len(LINEARS) + len(CALIBRATED_SITES)
    if flags.quant_scale and flags.quant_weights_acts:
        per_layer += len(LINEARS) + 2  # requant multipliers incl. score and ctx
    if flags.quant_softmax:
        per_layer += 2  # exponent numerator and probability output
    if flags.quant_layernorm:
        per_layer += 4  # gamma, beta, Q16.16 statistics, rsqrt
    return per_layer * mc.num_layers + (1 if flags.quant_weights_acts else 0)
