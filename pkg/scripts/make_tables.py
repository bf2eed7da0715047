"""Write the bitwidth sweep and the hardware/bandwidth latency grids as CSV.

    python3 scripts/make_tables.py --out-dir tables

Produces sweep.csv (k, error on the hidden-64 toy), perf_grid.csv (N x M at
the default bandwidth) and bandwidth.csv (latency against bytes per cycle).
"""
import argparse
import csv
from pathlib import Path

from fqbert.bim import HwConfig
from fqbert.fakequant import weight_only_error
from fqbert.model import ModelConfig
from fqbert.sched import perf, resource_summary
from fqbert.synth import synthetic_tokens, synthetic_weights

TOY = dict(num_layers=2, hidden=64, heads=4, ffn_dim=256, vocab_size=100, max_position=16,
           seq_len=8)


def write(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="tables")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    mc = ModelConfig.toy(**TOY)
    fw = synthetic_weights(mc, args.seed)
    inputs = synthetic_tokens(mc, 16, args.seed + 1)
    write(out / "sweep.csv", ["k", "error"],
          [[k, weight_only_error(fw, k, inputs)] for k in (2, 3, 4, 6, 8, 32)])

    bert = ModelConfig.bert_base()
    rows = []
    for n in (4, 8, 16, 32):
        for m in (8, 16, 32):
            hw = HwConfig.make(12, n, m)
            r = perf(bert, hw)
            rows.append([n, m, resource_summary(hw)["multipliers_8x4"], r.cycles,
                         f"{r.latency_ms:.4f}", f"{r.fps:.3f}"])
    write(out / "perf_grid.csv", ["n", "m", "multipliers", "cycles", "latency_ms", "fps"], rows)

    rows = []
    for bw in (0.5, 1, 2, 4, 8, 16, 32, 64):
        r = perf(bert, HwConfig(bandwidth_bytes_per_cycle=bw))
        rows.append([bw, r.cycles, f"{r.latency_ms:.4f}"])
    write(out / "bandwidth.csv", ["bytes_per_cycle", "cycles", "latency_ms"], rows)


if __name__ == "__main__":
    main()
