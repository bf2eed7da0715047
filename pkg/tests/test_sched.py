import json

import pytest

from fqbert.bim import HwConfig
from fqbert.errors import PlanningError
from fqbert.model import ModelConfig
from fqbert.sched import (SPECIAL, estimate_latency, model_mac_count, perf, plan_dataflow,
                          resource_summary)

BERT = ModelConfig.bert_base()
BIG_BUFFER = 4 * 1024 * 1024


def stage(plan, name, layer=0):
    return next(s for s in plan if s.name == name and s.layer == layer)


def test_tiling_examples():
    hw = HwConfig(weight_buffer_bytes=BIG_BUFFER)
    assert len(stage(plan_dataflow(BERT, hw, 768), "Q-proj").substages) == 1
    assert len(stage(plan_dataflow(BERT, hw, 64), "O-proj").substages) == 12
    ffn1 = stage(plan_dataflow(BERT, hw, 100), "FFN1")
    rows = [s.rows for s in ffn1.substages]
    assert len(rows) == 31 and rows[:30] == [100] * 30 and rows[-1] == 72


def test_tile_too_large_names_capacity():
    with pytest.raises(PlanningError, match="1179648 bytes"):
        plan_dataflow(BERT, HwConfig(), 768)


def test_weight_bytes_are_packed():
    plan = plan_dataflow(BERT, HwConfig())
    assert stage(plan, "Q-proj").weight_bytes == 768 * 768 // 2
    assert stage(plan, "QK^T").weight_bytes == 0
    assert stage(plan, "softmax").weight_bytes == 0
    assert stage(plan, "LN1").weight_bytes == 2 * 768
    assert stage(plan, "GELU").mode == SPECIAL


def test_work_conservation():
    for mc in (BERT, ModelConfig.toy(), ModelConfig(num_layers=3, hidden=96, heads=4,
                                                    ffn_dim=200, seq_len=17)):
        plan = plan_dataflow(mc, HwConfig())
        assert sum(s.mac_count for s in plan) == model_mac_count(mc)


def test_doubling_m_halves_compute_without_transfer():
    inf = 1e12
    a = perf(BERT, HwConfig.make(12, 8, 16, bandwidth_bytes_per_cycle=inf), tile_rows=96)
    b = perf(BERT, HwConfig.make(12, 8, 32, bandwidth_bytes_per_cycle=inf), tile_rows=96)
    for sa, sb in zip(a.stages, b.stages):
        if sa.mode != SPECIAL:
            assert sa.compute_cycles == 2 * sb.compute_cycles


def test_infinite_bandwidth_limit():
    hw = HwConfig(bandwidth_bytes_per_cycle=1e15)
    r = perf(BERT, hw)
    assert r.prologue_cycles <= 1 and r.io_cycles <= 2
    assert abs(r.cycles - sum(s.compute_cycles for s in r.stages)) <= 3


def test_total_is_overlap_sum_plus_prologue():
    for prologue in ("global", "per_stage"):
        r = perf(BERT, HwConfig(), prologue=prologue)
        assert r.cycles == sum(s.overlapped_cycles for s in r.stages) + r.prologue_cycles + r.io_cycles
        for s in r.stages:
            assert s.overlapped_cycles >= s.compute_cycles


def test_overlap_regime_when_bandwidth_suffices():
    r = perf(BERT, HwConfig())
    for s in r.stages[1:]:
        assert s.overlapped_cycles == s.compute_cycles


def test_latency_ratio_band():
    a = perf(BERT, HwConfig.make(12, 8, 16))
    b = perf(BERT, HwConfig.make(12, 16, 16))
    assert 1.6 <= a.latency_ms / b.latency_ms <= 2.05


@pytest.mark.parametrize("key,values", [("pus", [1, 2, 4, 8, 12, 16]), ("n", [1, 2, 4, 8, 16, 32]),
                                        ("m", [2, 4, 8, 16, 32])])
def test_monotone_in_hardware(key, values):
    lat = [perf(BERT, HwConfig.make(**{key: v})).cycles for v in values]
    assert all(x >= y for x, y in zip(lat, lat[1:]))


def test_monotone_in_bandwidth():
    lat = [perf(BERT, HwConfig(bandwidth_bytes_per_cycle=b)).cycles
           for b in (0.25, 1, 2, 4, 8, 16, 64, 1e9)]
    assert all(x >= y for x, y in zip(lat, lat[1:]))


def test_fps_and_latency_arithmetic():
    r = perf(BERT, HwConfig())
    assert r.latency_ms == pytest.approx(r.cycles / (214 * 1e3))
    assert r.fps == pytest.approx(1000 / r.latency_ms)


@pytest.mark.parametrize("pus,n,m,want", [(12, 8, 16, 1536), (12, 16, 16, 3072), (1, 1, 2, 2)])
def test_multiplier_count(pus, n, m, want):
    assert resource_summary(HwConfig.make(pus, n, m))["multipliers_8x4"] == want


def test_buffer_summary():
    s = resource_summary(HwConfig(), BERT)
    assert s["intermediate_buffer_bytes"] == 128 * 768 + 128 * 128 * 12
    assert s["weight_buffer_bytes"] <= 2 * HwConfig().weight_buffer_bytes
    assert s["psum_buffer_bytes"] == 2 * 96 * 4


def test_report_serialization():
    r = perf(ModelConfig.toy(), HwConfig())
    d = json.loads(r.to_json())
    assert set(d["totals"]) == {"cycles", "prologue_cycles", "io_cycles", "latency_ms", "fps",
                                "mac_count"}
    assert d["config"]["pes_per_pu"] == 8
    text = r.to_text()
    assert "latency_ms" in text and "softmax" in text


def test_per_stage_prologue_is_slower():
    g = perf(BERT, HwConfig())
    p = perf(BERT, HwConfig(), prologue="per_stage")
    assert p.cycles > g.cycles
    with pytest.raises(ValueError):
        estimate_latency(plan_dataflow(BERT, HwConfig()), HwConfig(), BERT, prologue="x")


def test_invalid_tile():
    with pytest.raises(PlanningError):
        plan_dataflow(BERT, HwConfig(), 0)
