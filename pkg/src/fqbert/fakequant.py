"""Real-arithmetic execution of the quantized BERT graph.

Values are carried as float64 reals and pass through quantize/dequantize at
the same points where the integer datapath rounds.  With every ablation flag
on this is the fake-quant reference for :func:`fqbert.model.forward_int`; with
flags off the corresponding subcomponents run in plain float arithmetic.

Rounding decisions are made on the float64 value unless it lies within float
noise of a rounding tie; those elements are re-evaluated in exact rational
arithmetic so the decision is the one exact real arithmetic would make.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .errors import NotCalibratedError
from .model import (EMBED_SITE, LINEARS, AblationFlags, FloatWeights, QuantModel, gelu, gelu_codes,
                    float_oracle_forward, host_embed, host_head, layer_norm_float,
                    softmax_float)
from .qnum import (Scale8, act_scale, qrange, quantize_values, round_fraction,
                   round_half_away, weight_scale)
from .specfn import (FX_FRAC, FX_ONE, LN_PARAM_FRAC, SOFTMAX_SCALE, LnParams,
                     build_exp_lut, rsqrt_fixed)

TIE_GUARD = 1e-9
_ACT_LO, _ACT_HI = qrange(8)


def nearest(t: np.ndarray, exact: Optional[Callable[[tuple], Fraction]] = None,
            mag: Optional[np.ndarray] = None, lo: Optional[int] = None,
            hi: Optional[int] = None) -> np.ndarray:
    """Round half away from zero, deferring near-tie elements to ``exact(index)``."""
    t = np.asarray(t, dtype=np.float64)
    r = np.atleast_1d(round_half_away(t)).reshape(t.shape).astype(np.int64)
    if exact is not None and t.size:
        frac = np.abs(t - np.trunc(t))
        size = np.abs(t) if mag is None else np.asarray(mag, dtype=np.float64)
        near = np.abs(frac - 0.5) <= TIE_GUARD * (1.0 + size)
        if lo is not None:
            near &= (t > lo - 1) & (t < hi + 1)
        for idx in zip(*np.nonzero(near)):
            r[idx] = round_fraction(exact(idx))
    if lo is not None:
        r = np.clip(r, lo, hi)
    return r


@dataclass
class Act:
    """A real-valued activation, with its integer codes when quantized."""

    val: np.ndarray
    codes: Optional[np.ndarray] = None
    scale: object = None  # Scale8 (quantized scales) or float (real scales)

    @property
    def exact_scale(self) -> Optional[Fraction]:
        return self.scale.as_fraction() if isinstance(self.scale, Scale8) else None


def _sval(s) -> float:
    return s.value() if isinstance(s, Scale8) else float(s)


class _RealEngine:
    def __init__(self, qm: Optional[QuantModel], flags: AblationFlags,
                 floats: Optional[FloatWeights], trace: Optional[dict]):
        self.qm, self.flags, self.fw, self.trace = qm, flags, floats, trace
        self.mc = qm.config if qm is not None else floats.config
        self.wa = flags.quant_weights_acts
        # quantized scales only mean something once weights/activations are quantized
        self.q_scale = flags.quant_scale and self.wa
        needs_float = not self.q_scale or not flags.quant_layernorm
        if needs_float and floats is None:
            raise ValueError("this ablation configuration needs the float checkpoint")
        if (self.wa or flags.quant_softmax) and qm is None:
            raise NotCalibratedError("quantized execution needs calibrated scales")

    # -- scales --------------------------------------------------------------
    def act_scale(self, site: str):
        if self.q_scale:
            if site == EMBED_SITE:
                return self.qm.embed_scale
            layer, name = site.split(".", 1)
            return self.qm.layers[int(layer[5:])].scales[name]
        spec = self.qm.specs.get(site)
        if spec is None:
            raise NotCalibratedError(f"no calibration statistics for {site}")
        return act_scale(spec)

    def _record(self, site: str, codes):
        if self.trace is not None and codes is not None:
            self.trace[site] = np.asarray(codes, dtype=np.int64)

    def _quant_act(self, site: str, t_scaled: np.ndarray, scale, exact=None, mag=None) -> Act:
        codes = nearest(t_scaled, exact, mag, _ACT_LO, _ACT_HI)
        self._record(site, codes)
        return Act(codes / _sval(scale), codes, scale)

    # -- building blocks -------------------------------------------------------
    def embed(self, token_ids) -> Act:
        host = self.qm.host if self.qm is not None else self.fw.tensors
        x = host_embed(host, token_ids, self.mc)
        if not self.wa:
            return Act(x)
        s = self.act_scale(EMBED_SITE)
        clip = self.qm.embed_clip if self.q_scale else self.qm.specs[EMBED_SITE].max_clip
        codes = np.asarray(quantize_values(x, _sval(s), self.mc.a_bits, clip), np.int64)
        self._record(EMBED_SITE, codes)
        return Act(codes / _sval(s), codes, s)

    def linear(self, i: int, name: str, bias: str, x: Act, out_site: str) -> Act:
        site = f"layer{i}.{out_site}"
        if not self.wa:
            return Act(x.val @ self.fw.layer(i, name).astype(np.float64).T
                       + self.fw.layer(i, bias).astype(np.float64))
        s_out = self.act_scale(site)
        if self.q_scale:
            lin = self.qm.layers[i].linears[name]
            s_w = lin.w.scale
            w_q = lin.w.data / s_w.value()
            b_q = lin.b.data / (x.scale.value() * s_w.value())
            s_eff = x.scale.value() * s_w.value() * lin.rm.value()
            t = (x.val @ w_q.T + b_q) * s_eff
            mag = (np.abs(x.val) @ np.abs(w_q).T + np.abs(b_q)) * s_eff
            W_I, b_I, rm, xc = lin.w.data, lin.b.data, lin.rm, x.codes

            def exact(idx):
                r, c = idx
                acc = int(np.dot(xc[r], W_I[c])) + int(b_I[c])
                return Fraction(acc * rm.m, 1 << rm.shift)

            return self._quant_act(site, t, s_out, exact, mag)
        W = self.fw.layer(i, name).astype(np.float64)
        b = self.fw.layer(i, bias).astype(np.float64)
        k = self.mc.w_bits
        s_w = weight_scale(W, k)
        w_q = quantize_values(W, s_w, k, float(np.abs(W).max())) / s_w
        s_b = x.scale * s_w
        b_q = round_half_away(b * s_b) / s_b
        return self._quant_act(site, (x.val @ w_q.T + b_q) * s_out, s_out)

    def attention(self, i: int, x: Act) -> Act:
        mc = self.mc
        q = self.linear(i, "Wq", "bq", x, "q")
        k = self.linear(i, "Wk", "bk", x, "k")
        v = self.linear(i, "Wv", "bv", x, "v")
        dh = mc.head_dim
        p = f"layer{i}."
        ctx_val = np.empty_like(q.val)
        ctx_codes = np.empty(q.val.shape, np.int64) if self.wa else None
        all_scores, all_probs = [], []
        for h in range(mc.heads):
            sl = slice(h * dh, (h + 1) * dh)
            qh = Act(q.val[:, sl], None if q.codes is None else q.codes[:, sl], q.scale)
            kh = Act(k.val[:, sl], None if k.codes is None else k.codes[:, sl], k.scale)
            vh = Act(v.val[:, sl], None if v.codes is None else v.codes[:, sl], v.scale)
            sc = self._scores(i, qh, kh)
            pr = self._softmax(i, sc)
            cx = self._context(i, pr, vh)
            ctx_val[:, sl] = cx.val
            if ctx_codes is not None:
                ctx_codes[:, sl] = cx.codes
            all_scores.append(sc.codes)
            all_probs.append(pr.codes)
        if self.wa:
            self._record(p + "scores", np.stack(all_scores))
            self._record(p + "ctx", ctx_codes)
        if self.flags.quant_softmax:
            self._record(p + "probs", np.stack(all_probs))
        ctx = Act(ctx_val, ctx_codes, self.act_scale(p + "ctx") if self.wa else None)
        return self.linear(i, "Wo", "bo", ctx, "attn_out")

    def _scores(self, i: int, q: Act, k: Act) -> Act:
        dh = self.mc.head_dim
        raw = q.val @ k.val.T
        if not self.wa:
            return Act(raw / math.sqrt(dh))
        site = f"layer{i}.scores"
        s_s = self.act_scale(site)
        if self.q_scale:
            rm = self.qm.layers[i].score_rm
            s_eff = q.scale.value() * k.scale.value() * rm.value()
            qc, kc = q.codes, k.codes

            def exact(idx):
                r, c = idx
                return Fraction(int(np.dot(qc[r], kc[c])) * rm.m, 1 << rm.shift)

            mag = (np.abs(q.val) @ np.abs(k.val).T) * s_eff
            codes = nearest(raw * s_eff, exact, mag, _ACT_LO, _ACT_HI)
        else:
            codes = nearest(raw / math.sqrt(dh) * s_s, lo=_ACT_LO, hi=_ACT_HI)
        return Act(codes / _sval(s_s), codes, s_s)

    def _softmax(self, i: int, s: Act) -> Act:
        if not self.flags.quant_softmax:
            return Act(softmax_float(s.val))
        if self.q_scale:
            lut = self.qm.layers[i].exp_lut
        else:
            lut = build_exp_lut(1.0 / _sval(self.act_scale(f"layer{i}.scores")))
        diff = (s.val.max(axis=-1, keepdims=True) - s.val) / lut.input_step
        idx = np.minimum(round_half_away(diff), 255)
        ent = np.asarray(lut.entries, dtype=np.int64)[idx]
        e = ent / 255.0
        t = e / e.sum(axis=-1, keepdims=True) * 256.0
        totals = ent.sum(axis=-1)

        def exact(ix):
            r, c = ix
            return Fraction(256 * int(ent[r, c]), int(totals[r]))

        codes = np.minimum(nearest(t, exact), 255)
        return Act(codes / SOFTMAX_SCALE.value(), codes, SOFTMAX_SCALE)

    def _context(self, i: int, pr: Act, v: Act) -> Act:
        raw = pr.val @ v.val
        if not self.wa:
            return Act(raw)
        s_c = self.act_scale(f"layer{i}.ctx")
        if self.q_scale:
            rm = self.qm.layers[i].ctx_rm
            s_eff = SOFTMAX_SCALE.value() * v.scale.value() * rm.value()
            exact = None
            if pr.codes is not None:
                pc, vc = pr.codes, v.codes

                def exact(idx):
                    r, c = idx
                    return Fraction(int(np.dot(pc[r], vc[:, c])) * rm.m, 1 << rm.shift)

            mag = (np.abs(pr.val) @ np.abs(v.val)) * s_eff
            codes = nearest(raw * s_eff, exact, mag, _ACT_LO, _ACT_HI)
        else:
            codes = nearest(raw * s_c, lo=_ACT_LO, hi=_ACT_HI)
        return Act(codes / _sval(s_c), codes, s_c)

    def layernorm(self, i: int, ln: str, a: Act, b: Act, out_site: str) -> Act:
        site = f"layer{i}.{out_site}"
        if not self.flags.quant_layernorm:
            y = layer_norm_float(a.val + b.val, self.fw.layer(i, ln + ".gamma").astype(np.float64),
                                 self.fw.layer(i, ln + ".beta").astype(np.float64))
            if not self.wa:
                return Act(y)
            s = self.act_scale(site)
            return self._quant_act(site, y * _sval(s), s)
        if self.qm is not None:
            params = getattr(self.qm.layers[i], ln)
        else:
            params = LnParams.from_float(self.fw.layer(i, ln + ".gamma"),
                                         self.fw.layer(i, ln + ".beta"))
        y, yu = self._ln_fixed(a, b, params)
        if not self.wa:
            return Act(y)
        s = self.act_scale(site)
        exact = None
        if isinstance(s, Scale8):
            sf = s.as_fraction()

            def exact(idx):
                return Fraction(int(yu[idx])) * sf / FX_ONE

        return self._quant_act(site, y * _sval(s), s, exact)

    @staticmethod
    def _to_grid(act: Act) -> np.ndarray:
        """Real input rounded onto the Q16.16 grid."""
        sf = act.exact_scale
        exact = None
        if sf is not None and act.codes is not None:
            codes = act.codes

            def exact(idx):
                return Fraction(int(codes[idx]) * FX_ONE) / sf

        return nearest(act.val * FX_ONE, exact)

    def _ln_fixed(self, a: Act, b: Act, p: LnParams) -> tuple[np.ndarray, np.ndarray]:
        """Fixed-point LN in real arithmetic; returns (real output, output in 2**-16 units)."""
        v = (self._to_grid(a) + self._to_grid(b)) / FX_ONE
        n = v.shape[-1]
        vu = np.rint(v * FX_ONE).astype(np.int64)  # exact: v lies on the grid
        mean = nearest(v.sum(axis=-1) / n * FX_ONE,
                       lambda idx: Fraction(int(vu[idx].sum()), n)) / FX_ONE
        c = v - mean[:, None]
        cu = np.rint(c * FX_ONE).astype(np.int64)
        var_u = nearest((c * c).sum(axis=-1) / n * FX_ONE,
                        lambda idx: Fraction(sum(int(t) * int(t) for t in cu[idx]), n * FX_ONE))
        r_u = np.array([rsqrt_fixed(int(s) + p.epsilon_fx) for s in var_u], dtype=np.int64)
        r = r_u / FX_ONE
        cr_u = nearest(c * r[:, None] * FX_ONE,
                       lambda idx: Fraction(int(cu[idx]) * int(r_u[idx[0]]), FX_ONE))
        cr = cr_u / FX_ONE
        g = p.gamma / float(1 << LN_PARAM_FRAC)
        gcr_u = nearest(g[None, :] * cr * FX_ONE,
                        lambda idx: Fraction(int(p.gamma[idx[1]]) * int(cr_u[idx]),
                                             1 << LN_PARAM_FRAC))
        y = gcr_u / FX_ONE + p.beta[None, :] / float(1 << LN_PARAM_FRAC)
        yu = gcr_u + (p.beta[None, :] << (FX_FRAC - LN_PARAM_FRAC))
        return y, yu

    def ffn(self, i: int, u: Act) -> Act:
        f1 = self.linear(i, "W1", "b1", u, "ffn1_out")
        if self.wa:
            site = f"layer{i}.gelu_out"
            s_g = self.act_scale(site)
            codes = np.asarray(gelu_codes(f1.codes, _sval(f1.scale), _sval(s_g)), np.int64)
            self._record(site, codes)
            g = Act(codes / _sval(s_g), codes, s_g)
        else:
            g = Act(gelu(f1.val))
        return self.linear(i, "W2", "b2", g, "ffn2_out")

    def run(self, token_ids) -> np.ndarray:
        host = self.qm.host if self.qm is not None else self.fw.tensors
        if self.mc.num_layers == 0:
            return host_head(host, host_embed(host, token_ids, self.mc)[0])
        x = self.embed(token_ids)
        for i in range(self.mc.num_layers):
            attn = self.attention(i, x)
            u = self.layernorm(i, "ln1", attn, x, "ln1_out")
            f2 = self.ffn(i, u)
            x = self.layernorm(i, "ln2", f2, u, "ln2_out")
        return host_head(host, x.val[0])


def forward_real(token_ids, qm: Optional[QuantModel], flags: AblationFlags = AblationFlags(),
                 floats: Optional[FloatWeights] = None, trace: Optional[dict] = None) -> np.ndarray:
    """Execute the graph in real arithmetic under the given ablation flags."""
    return _RealEngine(qm, flags, floats, trace).run(token_ids)


def weight_only_weights(fw: FloatWeights, k: int) -> FloatWeights:
    """Encoder weight matrices fake-quantized at ``k`` bits; ``k >= 32`` is a passthrough."""
    if k >= 32:
        return fw
    tensors = dict(fw.tensors)
    for i in range(fw.config.num_layers):
        for w in LINEARS:
            name = f"layer{i}.{w}"
            W = np.asarray(fw.tensors[name], np.float64)
            s = weight_scale(W, k)
            tensors[name] = quantize_values(W, s, k) / s
    return FloatWeights(fw.config, tensors)


def weight_only_error(fw: FloatWeights, k: int, inputs) -> float:
    """Mean relative logit error of weight-only quantization against the float oracle."""
    fq = weight_only_weights(fw, k)
    errs = []
    for ids in inputs:
        ref = float_oracle_forward(ids, fw)
        got = float_oracle_forward(ids, fq)
        errs.append(np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-30))
    return float(np.mean(errs))
