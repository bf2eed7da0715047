import importlib.util
import struct
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_toy
from fqbert.errors import (CheckpointError, ChecksumError, ContainerFormatError,
                           DegenerateScaleError, NotCalibratedError, VersionError)
from fqbert.model import CALIBRATED_SITES, EMBED_SITE, FloatWeights, ModelConfig, forward_int
from fqbert.qnum import act_scale
from fqbert import store
from fqbert.store import (DType, FqbtContainer, Tensor, build_quant_model, calibrate,
                          compression_report, from_container, import_float_checkpoint, load,
                          pack_crumbs, pack_nibbles, quantize_model, save, save_float_checkpoint,
                          to_container, unpack_crumbs, unpack_nibbles)

ROOT = Path(__file__).resolve().parents[1]


def load_oracle():
    spec = importlib.util.spec_from_file_location("byte_count_oracle",
                                                  ROOT / "scripts" / "byte_count_oracle.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def random_container(rng) -> FqbtContainer:
    tensors = {}
    for i in range(int(rng.integers(1, 8))):
        dt = DType(int(rng.integers(0, len(DType))))
        shape = tuple(int(d) for d in rng.integers(1, 6, int(rng.integers(1, 3))))
        if dt is DType.I4:
            data = rng.integers(-8, 8, shape)
        elif dt is DType.I2:
            data = rng.integers(-2, 2, shape)
        elif dt in (DType.I8, DType.LNPARAM8):
            data = rng.integers(-128, 128, shape)
        elif dt is DType.U8:
            data = rng.integers(0, 256, shape)
        elif dt is DType.I32:
            data = rng.integers(-(2**31), 2**31, shape)
        elif dt is DType.F32:
            data = rng.standard_normal(shape).astype(np.float32)
        elif dt is DType.SCALE8:
            data = np.stack([rng.integers(128, 256, shape), rng.integers(-128, 128, shape)], -1)
        else:
            data = np.stack([rng.integers(2**30, 2**31, shape), rng.integers(0, 64, shape)], -1)
        tensors[f"t{i}.{dt.name.lower()}"] = Tensor(dt, data)
    return FqbtContainer({"n": len(tensors), "tag": "x" * int(rng.integers(0, 70))}, tensors)


def test_nibble_examples():
    assert pack_nibbles([1, -1]) == bytes([0xF1])
    assert pack_nibbles([7]) == bytes([0x07])
    assert list(unpack_nibbles(bytes([0xF1, 0x07]), 3)) == [1, -1, 7]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-8, 7), max_size=41))
def test_nibble_round_trip(vals):
    assert list(unpack_nibbles(pack_nibbles(vals), len(vals))) == vals


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-2, 1), max_size=23))
def test_crumb_round_trip(vals):
    assert list(unpack_crumbs(pack_crumbs(vals), len(vals))) == vals


def test_container_round_trip_and_alignment(tmp_path):
    rng = np.random.default_rng(0)
    c = random_container(rng)
    p = tmp_path / "c.fqbt"
    save(c, p)
    d = load(p)
    assert d == c
    assert d.to_bytes() == p.read_bytes()
    buf = p.read_bytes()
    payload_off = struct.unpack_from("<Q", buf, 32)[0]
    assert payload_off % 64 == 0


def test_corruption_detected():
    rng = np.random.default_rng(1)
    buf = bytearray(random_container(rng).to_bytes())
    payload_off = struct.unpack_from("<Q", buf, 32)[0]
    buf[payload_off] ^= 0x40
    with pytest.raises(ChecksumError):
        FqbtContainer.from_bytes(bytes(buf))


def test_version_and_magic_rejected():
    buf = bytearray(random_container(np.random.default_rng(2)).to_bytes())
    bumped = bytearray(buf)
    struct.pack_into("<H", bumped, 4, 2)
    with pytest.raises(VersionError):
        FqbtContainer.from_bytes(bytes(bumped))
    buf[0:4] = b"NOPE"
    with pytest.raises(ContainerFormatError):
        FqbtContainer.from_bytes(bytes(buf))


def test_truncated_and_misaligned():
    good = random_container(np.random.default_rng(3)).to_bytes()
    with pytest.raises(ContainerFormatError):
        FqbtContainer.from_bytes(good[:-5])
    with pytest.raises(ContainerFormatError):
        FqbtContainer.from_bytes(good[:20])
    bad = bytearray(good)
    off = struct.unpack_from("<Q", bad, 32)[0]
    struct.pack_into("<Q", bad, 32, off + 8)
    with pytest.raises(ContainerFormatError):
        FqbtContainer.from_bytes(bytes(bad))


def test_quantized_model_round_trip(toy):
    _, _, qm = toy
    c = to_container(qm)
    c2 = FqbtContainer.from_bytes(c.to_bytes())
    qm2 = from_container(c2)
    ids = [1, 2, 3, 4, 5]
    assert np.array_equal(forward_int(ids, qm), forward_int(ids, qm2))
    assert to_container(qm2).to_bytes() == c.to_bytes()


def test_container_has_every_site_and_weight_entry(toy):
    _, _, qm = toy
    c = to_container(qm)
    assert EMBED_SITE + ".scale" in c.tensors
    for i in range(qm.config.num_layers):
        for s in CALIBRATED_SITES:
            assert c.tensors[f"layer{i}.{s}.scale"].dtype is DType.SCALE8
        for w, b in (("Wq", "bq"), ("Wo", "bo"), ("W1", "b1"), ("W2", "b2")):
            assert c.tensors[f"layer{i}.{w}"].dtype is DType.I4
            assert c.tensors[f"layer{i}.{b}"].dtype is DType.I32
            assert c.tensors[f"layer{i}.{w}.rm"].dtype is DType.REQUANT


def test_checkpoint_round_trip_and_errors(tmp_path, toy):
    fw, _, _ = toy
    p = tmp_path / "m.ck"
    save_float_checkpoint(fw, p)
    back = import_float_checkpoint(p)
    assert all(np.array_equal(back.tensors[n], fw.tensors[n]) for n in fw.tensors)

    missing = FloatWeights(fw.config, {n: t for n, t in fw.tensors.items() if n != "layer0.Wq"})
    save_float_checkpoint(missing, p)
    with pytest.raises(CheckpointError, match="layer0.Wq"):
        import_float_checkpoint(p)

    wrong = dict(fw.tensors)
    wrong["layer1.W1"] = np.zeros((3, 3), np.float32)
    save_float_checkpoint(FloatWeights(fw.config, wrong), p)
    with pytest.raises(CheckpointError, match=r"\(32, 16\).*\(3, 3\)"):
        import_float_checkpoint(p)


def test_calibrate_single_batch(toy):
    fw, _, _ = toy
    seq = [1, 2, 3, 4]
    maxima = {}
    from fqbert.model import float_oracle_forward
    float_oracle_forward(seq, fw, lambda s, t: maxima.__setitem__(s, float(np.abs(t).max())))
    specs = calibrate(fw, [seq])
    for site, spec in specs.items():
        assert act_scale(spec) == pytest.approx(127 / maxima[site])
    assert len(specs) == 1 + fw.config.num_layers * len(CALIBRATED_SITES)
    twice = calibrate(fw, [seq, seq])
    assert all(twice[s].ema_state == pytest.approx(specs[s].ema_state) for s in specs)


def test_calibrate_ema_recurrence(monkeypatch):
    from fqbert import store as st_mod
    maxima = iter([1.0, 2.0])

    def fake_oracle(seq, fw, rec):
        rec("embed.out", np.array([next(maxima)]))

    monkeypatch.setattr(st_mod, "float_oracle_forward", fake_oracle)
    mc = ModelConfig.toy()
    specs = st_mod.calibrate(FloatWeights(mc, {}), [[1], [2]], decay=0.99)
    assert specs["embed.out"].ema_state == pytest.approx(1.01)
    assert act_scale(specs["embed.out"]) == pytest.approx(127 / 1.01)


def test_calibrate_empty_stream(toy):
    fw, _, _ = toy
    with pytest.raises(NotCalibratedError):
        calibrate(fw, [])


def test_zero_weights_degenerate_per_tensor(toy):
    fw, specs, _ = toy
    t = dict(fw.tensors)
    t["layer1.Wv"] = np.zeros_like(t["layer1.Wv"])
    with pytest.raises(DegenerateScaleError, match="layer1.Wv"):
        quantize_model(FloatWeights(fw.config, t), specs)


def test_zero_weights_pack_to_zero_bytes():
    assert pack_nibbles(np.zeros(7, int)) == bytes(4)


def test_requantize_idempotent(toy):
    fw, specs, qm = toy
    # dequantized weights quantize back to the same integers
    t = dict(fw.tensors)
    for i, L in enumerate(qm.layers):
        for name, lin in L.linears.items():
            t[f"layer{i}.{name}"] = lin.w.data / lin.w.scale.value()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        qm2 = build_quant_model(FloatWeights(fw.config, t), specs)
    for L, L2 in zip(qm.layers, qm2.layers):
        for name in L.linears:
            assert np.array_equal(L.linears[name].w.data, L2.linears[name].w.data)


def test_toy_ratio_matches_oracle(toy):
    oracle = load_oracle()
    _, _, qm = toy
    mc = qm.config
    for k in (2, 4, 8):
        fw, specs, _ = make_toy(0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            r = compression_report(quantize_model(fw, specs, k))
        fl, q = oracle.encoder_bytes(mc.num_layers, mc.hidden, mc.ffn_dim, k)
        assert (r["encoder_float_bytes"], r["encoder_quant_bytes"]) == (fl, q)


def test_calib_file_reader(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("1 2 3\n\n4,5\n")
    assert store.read_calib_file(p) == [[1, 2, 3], [4, 5]]
    with pytest.raises(ValueError):
        list(store.calib_stream([[1, 999]], ModelConfig.toy()))
