"""Property checks shared by the ``verify`` command and the acceptance tests."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bim import BimConfig, Mode, Variant, bim_dot
from .model import (LN_EPS, ModelConfig, QuantModel, fake_quant_forward, forward_int)
from .qnum import QTensor, Scale8, qrange, quantize_scale8, round_half_away
from .specfn import ExpLut, LnParams, build_exp_lut, layernorm_fixed, softmax_q


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def check_bim_exhaustive() -> CheckResult:
    """All signed 8x8 pairs through one W8 lane, both variants."""
    a, w = np.meshgrid(np.arange(-128, 128), np.arange(-128, 128), indexing="ij")
    a = a.reshape(-1, 1)
    w = w.reshape(-1, 1)
    exact = (a * w)[:, 0]
    for v in Variant:
        got = bim_dot(a, w, Mode.W8, BimConfig(16, v))
        bad = int(np.count_nonzero(got != exact))
        if bad:
            return CheckResult("bim_exhaustive", False, f"{v.value}: {bad} mismatches")
    return CheckResult("bim_exhaustive", True, "65536 pairs x 2 variants")


def random_toy_config(rng: np.random.Generator) -> ModelConfig:
    heads = int(rng.choice([1, 2, 4]))
    head_dim = int(rng.choice([1, 2, 3, 4, 8, 16]))
    hidden = heads * head_dim
    return ModelConfig(num_layers=int(rng.integers(1, 3)), hidden=hidden, heads=heads,
                       ffn_dim=int(rng.integers(1, 5)) * hidden, seq_len=int(rng.integers(1, 9)),
                       vocab_size=32, max_position=8, num_labels=2,
                       w_bits=int(rng.choice([2, 3, 4, 6, 8])))


def random_toy_model(seed: int) -> tuple[QuantModel, list[int]]:
    """A seeded random toy model calibrated on random tokens, plus an input."""
    from .store import build_quant_model, calibrate
    from .synth import synthetic_tokens, synthetic_weights

    rng = np.random.default_rng(seed)
    mc = random_toy_config(rng)
    fw = synthetic_weights(mc, seed)
    specs = calibrate(fw, synthetic_tokens(mc, 2, seed + 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        qm = build_quant_model(fw, specs)
    ids = synthetic_tokens(mc, 1, seed + 2, seq_len=int(rng.integers(1, mc.seq_len + 1)))[0]
    return qm, ids


def traces_equal(qm: QuantModel, ids) -> Optional[str]:
    """None if the integer and fake-quant runs agree at every site, else the first mismatch."""
    t_int, t_fake = {}, {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = forward_int(ids, qm, trace=t_int)
        b = fake_quant_forward(ids, qm, trace=t_fake)
    if t_int.keys() != t_fake.keys():
        return f"site sets differ: {sorted(set(t_int) ^ set(t_fake))[:3]}"
    for k in t_int:
        if not np.array_equal(t_int[k], t_fake[k]):
            return k
    if not np.array_equal(a, b):
        return "logits"
    return None


def check_pipeline_equivalence(trials: int, seed: int = 0,
                               qm: Optional[QuantModel] = None) -> CheckResult:
    """Random toy models (or ``qm`` with random inputs): integer == fake-quant."""
    rng = np.random.default_rng(seed)
    for t in range(trials):
        if qm is None:
            model, ids = random_toy_model(seed * 1_000_003 + t)
        else:
            model = qm
            n = int(rng.integers(1, qm.config.seq_len + 1))
            ids = rng.integers(0, qm.config.vocab_size, size=n).tolist()
        bad = traces_equal(model, ids)
        if bad:
            return CheckResult("pipeline_equivalence", False, f"trial {t}: mismatch at {bad}")
    return CheckResult("pipeline_equivalence", True, f"{trials} trials bit-exact")


def check_softmax(rows: int, seed: int = 0, lut: Optional[ExpLut] = None,
                  scale: Optional[Scale8] = None, max_n: int = 128) -> CheckResult:
    """Sum within n/2 of 256, shift invariance and monotonicity on random rows."""
    rng = np.random.default_rng(seed)
    if lut is None:
        scale = scale or Scale8(128, -3)  # 16 codes per unit
        lut = build_exp_lut(1.0 / scale.value())
    scale = scale or Scale8(128, -3)
    done = 0
    while done < rows:
        n = int(rng.integers(2, max_n + 1))
        batch = min(rows - done, 2048)
        x = rng.integers(-127, 128, size=(batch, n))
        out = softmax_q(QTensor(x, 8, True, scale), lut).data
        dev = np.abs(out.sum(-1) - 256)
        if (dev > n / 2).any():
            return CheckResult("softmax", False, f"sum off by {int(dev.max())} at n={n}")
        c = int(rng.integers(-127, 128))
        shifted = np.clip(x + c, -127, 127)
        same = (shifted - x == c).all(-1)
        out2 = softmax_q(QTensor(shifted, 8, True, scale), lut).data
        if not np.array_equal(out[same], out2[same]):
            return CheckResult("softmax", False, "not invariant under a constant shift")
        order = np.argsort(x, axis=-1, kind="stable")
        if (np.diff(np.take_along_axis(out, order, -1), axis=-1) < 0).any():
            return CheckResult("softmax", False, "monotonicity violated")
        done += batch
    return CheckResult("softmax", True, f"{rows} rows")


def ln_oracle_codes(a, b, s1: Scale8, s2: Scale8, p: LnParams, s_out: Scale8) -> np.ndarray:
    """Real-arithmetic LN of the dequantized inputs, quantized at ``s_out``."""
    x = np.asarray(a, np.float64) / s1.value() + np.asarray(b, np.float64) / s2.value()
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + LN_EPS) * p.gamma_float() + p.beta_float()
    lo, hi = qrange(8)
    return np.clip(round_half_away(y * s_out.value()), lo, hi)


def check_layernorm(trials: int, seed: int = 0, sizes=(8, 64, 768)) -> CheckResult:
    """At most 3 LSB from the real oracle; constant rows give quantize(beta)."""
    rng = np.random.default_rng(seed)
    worst = 0
    for t in range(trials):
        n = int(sizes[t % len(sizes)])
        s1 = quantize_scale8(float(rng.uniform(2, 64)))
        s2 = quantize_scale8(float(rng.uniform(2, 64)))
        p = LnParams(rng.integers(-127, 128, n), rng.integers(-127, 128, n))
        s_out = quantize_scale8(127 / 5.0)
        a = rng.integers(-127, 128, (4, n))
        b = rng.integers(-127, 128, (4, n))
        got = layernorm_fixed(QTensor(a, 8, True, s1), QTensor(b, 8, True, s2), p, s_out).out
        dev = int(np.abs(got - ln_oracle_codes(a, b, s1, s2, p, s_out)).max())
        worst = max(worst, dev)
        if dev > 3:
            return CheckResult("layernorm", False, f"trial {t}: {dev} LSB at n={n}")
        const = np.full((1, n), int(rng.integers(-127, 128)))
        zero = np.zeros((1, n), np.int64)
        out = layernorm_fixed(QTensor(const, 8, True, s1), QTensor(zero, 8, True, s2), p, s_out).out
        want = np.clip(round_half_away(p.beta_float() * s_out.value()), -127, 127)
        if not np.array_equal(out[0], want):
            return CheckResult("layernorm", False, f"trial {t}: constant row != quantize(beta)")
    return CheckResult("layernorm", True, f"{trials} trials, worst {worst} LSB")


def faulty_lut(lut: ExpLut, index: int = 4) -> ExpLut:
    """Copy of ``lut`` with one entry raised above its predecessor."""
    e = np.array(lut.entries, dtype=np.int64)
    e[index] = 255
    return ExpLut(e, lut.input_step)


def run_suite(qm: Optional[QuantModel], trials: int, seed: int = 0,
              inject_fault: bool = False) -> list[CheckResult]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    results = [check_bim_exhaustive(),
               check_pipeline_equivalence(trials, seed, qm)]
    if qm is not None:
        L = qm.layers[0]
        lut, scale = L.exp_lut, L.scales["scores"]
    else:
        scale = Scale8(128, -3)
        lut = build_exp_lut(1.0 / scale.value())
    if inject_fault:
        lut = faulty_lut(lut)
    results.append(check_softmax(max(trials, 100) * 10, seed, lut, scale))
    results.append(check_layernorm(trials, seed))
    return results
