import numpy as np
import pytest

from fqbert.bim import (BimConfig, HwConfig, Mode, NibbleSplit, Variant, bim_dot, matvec_cycles,
                        pe_matmul, pe_matvec, pe_matvec_requant, split8)
from fqbert.qnum import QTensor, Scale8, requant_from_factor

ONE = Scale8(128, -7)
CFG_A = BimConfig(16, Variant.TYPE_A)
CFG_B = BimConfig(16, Variant.TYPE_B)


def q(data, bits=8):
    return QTensor(np.asarray(data), bits, True, ONE)


@pytest.mark.parametrize("b,hi,lo", [(100, 6, 4), (-1, -1, 15), (0, 0, 0)])
def test_split8_examples(b, hi, lo):
    assert split8(b) == NibbleSplit(hi, lo)


def test_split8_reconstructs_all():
    hi, lo = split8(np.arange(-128, 128))
    assert np.array_equal(hi * 16 + lo, np.arange(-128, 128))
    assert lo.min() >= 0 and lo.max() <= 15


@pytest.mark.parametrize("cfg", [CFG_A, CFG_B])
def test_bim_dot_examples(cfg):
    assert bim_dot([3, -2], [7, -8], Mode.W4, cfg) == 37
    assert bim_dot([-3], [100], Mode.W8, cfg) == -300
    assert bim_dot([5, 9, -3], [0, 0, 0], Mode.W8, cfg) == 0


@pytest.mark.parametrize("cfg", [CFG_A, CFG_B])
def test_bim_exhaustive_w8(cfg):
    a, w = np.meshgrid(np.arange(-128, 128), np.arange(-128, 128), indexing="ij")
    got = bim_dot(a.reshape(-1, 1), w.reshape(-1, 1), Mode.W8, cfg)
    assert np.array_equal(got, (a * w).reshape(-1))


def test_bim_unsigned_activations():
    a = np.arange(0, 256).reshape(-1, 1)
    w = np.full_like(a, -77)
    assert np.array_equal(bim_dot(a, w, Mode.W8, CFG_A, a_signed=False), (a * w)[:, 0])


def test_variant_equivalence_random():
    rng = np.random.default_rng(0)
    for mode, (wlo, whi) in ((Mode.W4, (-8, 8)), (Mode.W8, (-128, 128))):
        lanes = CFG_A.lanes(mode)
        a = rng.integers(-128, 128, (100_000, lanes))
        w = rng.integers(wlo, whi, (100_000, lanes))
        ra = bim_dot(a, w, mode, CFG_A)
        assert np.array_equal(ra, bim_dot(a, w, mode, CFG_B))
        assert np.array_equal(ra, (a * w).sum(-1))


def test_bim_capacity_and_ranges():
    with pytest.raises(ValueError):
        bim_dot([1] * 9, [1] * 9, Mode.W8, CFG_A)
    with pytest.raises(ValueError):
        bim_dot([1], [8], Mode.W4, CFG_A)
    with pytest.raises(ValueError):
        BimConfig(3)


def test_pe_matvec_examples():
    hw = HwConfig()
    assert list(pe_matvec(q([[1, 0], [0, 1]], 4), q([5, -7]), hw, Mode.W4).acc) == [5, -7]
    assert list(pe_matvec(q([[2, 3], [-1, 4]], 4), q([10, -2]), hw, Mode.W4).acc) == [14, -18]
    assert not pe_matvec(q(np.zeros((3, 5), int), 4), q([1, 2, 3, 4, 5]), hw, Mode.W4).acc.any()


def naive_gemv(w, x):
    out = []
    for row in w:
        s = 0
        for a, b in zip(row, x):
            s += int(a) * int(b)
        out.append(s)
    return out


def test_pe_matvec_oracle_and_tiling_invariance():
    rng = np.random.default_rng(1)
    configs = [HwConfig.make(1, 1, 2), HwConfig.make(12, 8, 16), HwConfig.make(3, 5, 6, "TypeB"),
               HwConfig.make(2, 16, 32)]
    for _ in range(1000):
        r, c = rng.integers(1, 65, 2)
        mode = Mode.W4 if rng.random() < 0.5 else Mode.W8
        lim = 8 if mode is Mode.W4 else 128
        w = rng.integers(-lim, lim, (r, c))
        x = rng.integers(-128, 128, c)
        want = naive_gemv(w, x)
        hw = configs[int(rng.integers(len(configs)))]
        res = pe_matmul(w, x, hw, mode)
        assert list(res.acc) == want and not res.saturated


def test_cycle_count_depends_on_config_only():
    w = np.ones((96, 64), int)
    x = np.ones(64, int)
    a = pe_matmul(w, x, HwConfig.make(12, 8, 16), Mode.W4)
    b = pe_matmul(w, x, HwConfig.make(12, 8, 32), Mode.W4)
    assert np.array_equal(a.acc, b.acc)
    assert a.cycles == 4 and b.cycles == 2
    assert matvec_cycles(96, 64, HwConfig.make(12, 8, 16), Mode.W8) == 8


def test_accumulator_saturates_and_flags():
    w = np.full((1, 200_000), 127)
    x = np.full(200_000, 127)
    res = pe_matmul(w, x, HwConfig(), Mode.W8)
    assert res.saturated and res.acc[0] == 2**31 - 1


def test_pe_matvec_requant_examples():
    hw = HwConfig()
    one = requant_from_factor(1.0)
    out, _ = pe_matvec_requant(q([[1]], 4), q([4]), [0], one, hw, Mode.W4)
    assert list(out.data) == [4]
    out, _ = pe_matvec_requant(q([[2]], 4), q([50]), [0], requant_from_factor(0.5), hw, Mode.W4)
    assert list(out.data) == [50]
    out, _ = pe_matvec_requant(q([[127]]), q([127]), [0], requant_from_factor(1e-9), hw, Mode.W8)
    assert list(out.data) == [0]
    out, _ = pe_matvec_requant(q([[127]]), q([127]), [0], one, hw, Mode.W8)
    assert list(out.data) == [127]


def test_w4_needs_4bit_weights():
    with pytest.raises(ValueError):
        pe_matvec(q([[1]], 8), q([1]), HwConfig(), Mode.W4)
