import json
from pathlib import Path

import numpy as np
import pytest

from fqbert.cli import main
from fqbert.model import CALIBRATED_SITES, float_oracle_forward
from fqbert.store import import_float_checkpoint

GOLDEN = Path(__file__).parent / "data" / "golden_toy.json"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def logits_lines(text):
    return [[float(v) for v in line.split()[1:]] for line in text.splitlines()
            if line.startswith("logits ")]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "0", "--out", str(d / "m.ck"),
                 "--calib-out", str(d / "calib.txt"), "--calib-count", "4"]) == 0
    assert main(["calibrate", "--checkpoint", str(d / "m.ck"), "--calib", str(d / "calib.txt"),
                 "--out", str(d / "specs.json")]) == 0
    assert main(["quantize", "--checkpoint", str(d / "m.ck"), "--specs", str(d / "specs.json"),
                 "--w-bits", "4", "--out", str(d / "m.fqbt")]) == 0
    return d


def test_calibrate_two_sequences(tmp_path, capsys, pipeline):
    calib = tmp_path / "two.txt"
    calib.write_text("1 2 3 4\n5 6 7\n")
    code, _, _ = run(capsys, "calibrate", "--checkpoint", pipeline / "m.ck", "--calib", calib,
                     "--out", tmp_path / "s.json")
    assert code == 0
    specs = json.loads((tmp_path / "s.json").read_text())
    layers = import_float_checkpoint(pipeline / "m.ck").config.num_layers
    assert len(specs) == 1 + layers * len(CALIBRATED_SITES)
    code, _, _ = run(capsys, "calibrate", "--checkpoint", pipeline / "m.ck", "--calib", calib,
                     "--out", tmp_path / "s2.json")
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "s2.json").read_bytes()


def test_quantize_deterministic(tmp_path, capsys, pipeline):
    code, out, _ = run(capsys, "quantize", "--checkpoint", pipeline / "m.ck", "--specs",
                       pipeline / "specs.json", "--out", tmp_path / "again.fqbt")
    assert code == 0 and "compression encoder-only" in out
    assert (tmp_path / "again.fqbt").read_bytes() == (pipeline / "m.fqbt").read_bytes()


def test_quantize_without_calibration(tmp_path, capsys, pipeline):
    code, _, err = run(capsys, "calibrate", "--checkpoint", pipeline / "m.ck",
                       "--out", tmp_path / "s.json")
    assert code == 2 and "not calibrated" in err
    code, _, err = run(capsys, "quantize", "--checkpoint", pipeline / "m.ck", "--specs",
                       tmp_path / "missing.json", "--out", tmp_path / "x.fqbt")
    assert code != 0


def test_golden_logits(capsys, pipeline):
    golden = json.loads(GOLDEN.read_text())
    for ids, want in zip(golden["inputs"], golden["logits"]):
        code, out, _ = run(capsys, "infer", "--container", pipeline / "m.fqbt",
                           "--ids", " ".join(map(str, ids)))
        assert code == 0
        assert logits_lines(out) == [[float(v) for v in want]]


def test_ablation_none_is_float_oracle(capsys, pipeline):
    ids = [3, 1, 4, 1, 5]
    code, out, _ = run(capsys, "infer", "--container", pipeline / "m.fqbt", "--checkpoint",
                       pipeline / "m.ck", "--ablation", "none", "--ids", "3,1,4,1,5")
    assert code == 0
    want = float_oracle_forward(ids, import_float_checkpoint(pipeline / "m.ck"))
    assert np.allclose(logits_lines(out)[0], want, rtol=1e-6, atol=0)


def test_partial_ablation_needs_checkpoint(capsys, pipeline):
    code, _, err = run(capsys, "infer", "--container", pipeline / "m.fqbt", "--ablation", "w/a",
                       "--ids", "1 2")
    assert code == 2 and "checkpoint" in err
    code, _, _ = run(capsys, "infer", "--container", pipeline / "m.fqbt", "--ablation", "bogus")
    assert code == 2


def test_dump_intermediates_in_range(tmp_path, capsys, pipeline):
    npz = tmp_path / "dump.npz"
    code, out, _ = run(capsys, "infer", "--container", pipeline / "m.fqbt", "--num-inputs", "2",
                       "--dump-intermediates", npz)
    assert code == 0 and "range violation" not in out
    with np.load(npz) as z:
        assert len(z.files) > 0
        for name in z.files:
            a = z[name]
            lo, hi = (0, 255) if name.endswith("probs") else (-127, 127)
            assert a.min() >= lo and a.max() <= hi, name


def test_verify_passes(capsys, pipeline):
    code, out, _ = run(capsys, "verify", "--container", pipeline / "m.fqbt", "--trials", "5")
    assert code == 0 and out.strip().endswith("properties passed")


def test_verify_detects_injected_fault(capsys):
    code, out, _ = run(capsys, "verify", "--trials", "3", "--inject-fault")
    assert code == 1 and "monoton" in out


def test_verify_rejects_zero_trials(capsys):
    assert run(capsys, "verify", "--trials", "0")[0] == 2


def test_ablate_table(capsys, pipeline):
    code, out, _ = run(capsys, "ablate", "--container", pipeline / "m.fqbt", "--checkpoint",
                       pipeline / "m.ck", "--num-inputs", "2")
    assert code == 0
    rows = [line.split() for line in out.splitlines()[1:]]
    assert rows[0][0] == "none" and float(rows[0][2]) == 0.0
    sites = [int(r[1]) for r in rows]
    assert sites == sorted(sites) and sites[-1] > 0
    assert all(np.isfinite(float(r[2])) for r in rows)


def test_sweep_table(capsys, pipeline):
    code, out, _ = run(capsys, "sweep", "--checkpoint", pipeline / "m.ck", "--bits", "2,4,8,32")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "k error"
    table = [line.split() for line in lines[1:]]
    assert all(len(r) == 2 for r in table)
    err = [float(r[1]) for r in table]
    assert err[0] >= err[1] >= err[2] and err[3] < 1e-6


def test_sweep_rejects_one_bit(capsys, pipeline):
    assert run(capsys, "sweep", "--checkpoint", pipeline / "m.ck", "--bits", "1")[0] == 2


def test_perf_grid(capsys):
    code, out, _ = run(capsys, "perf", "--config", "bert-base", "--n-grid", "8,16", "--json")
    assert code == 0
    a, b = json.loads(out)
    assert 1.6 <= a["totals"]["latency_ms"] / b["totals"]["latency_ms"] <= 2.05
    for r in (a, b):
        assert r["totals"]["fps"] == pytest.approx(1000 / r["totals"]["latency_ms"])


def test_perf_bandwidth_sweep(capsys):
    code, out, _ = run(capsys, "perf", "--config", "bert-base", "--bw-grid", "1,4,16,64")
    assert code == 0
    cycles = [int(line.split()[5]) for line in out.strip().splitlines()[1:]]
    assert len(cycles) == 4 and all(x >= y for x, y in zip(cycles, cycles[1:]))


def test_perf_bad_tile(capsys):
    assert run(capsys, "perf", "--config", "bert-base", "--tile-rows", "768")[0] == 2


def test_quantize_ratio_line_matches_byte_count(tmp_path, capsys):
    from test_store import load_oracle
    oracle = load_oracle()
    ck = tmp_path / "m.ck"
    assert main(["synth", "--config", "toy", "--hidden", "128", "--ffn", "512", "--heads", "4",
                 "--out", str(ck), "--calib-out", str(tmp_path / "c.txt")]) == 0
    assert main(["calibrate", "--checkpoint", str(ck), "--calib", str(tmp_path / "c.txt"),
                 "--out", str(tmp_path / "s.json")]) == 0
    capsys.readouterr()
    ratios = {}
    for bits in (2, 4, 8):
        code, out, _ = run(capsys, "quantize", "--checkpoint", ck, "--specs", tmp_path / "s.json",
                           "--w-bits", bits, "--out", tmp_path / "m.fqbt", "--warnings", "ignore")
        assert code == 0
        line = next(x for x in out.splitlines() if x.startswith("compression encoder-only"))
        ratios[bits] = float(line.split()[2].rstrip("x"))
        fl, q = oracle.encoder_bytes(2, 128, 512, bits)
        assert ratios[bits] == pytest.approx(fl / q, abs=0.005)
    assert ratios[2] > ratios[4] > ratios[8]


def test_export_lut(tmp_path, capsys, pipeline):
    out = tmp_path / "lut.bin"
    code, _, _ = run(capsys, "export-lut", "--container", pipeline / "m.fqbt", "--out", out)
    blob = out.read_bytes()
    assert code == 0 and len(blob) == 256 and blob[0] == 255
    assert all(a >= b for a, b in zip(blob, blob[1:]))


def test_io_errors(tmp_path, capsys):
    bad = tmp_path / "bad.fqbt"
    bad.write_bytes(b"garbage")
    assert run(capsys, "infer", "--container", bad)[0] == 3
    assert run(capsys, "infer", "--container", tmp_path / "nope.fqbt")[0] == 3
    assert run(capsys, "frobnicate")[0] == 2
