"""Command-line entry point.

Exit codes: 0 success, 1 property failure, 2 usage or configuration error,
3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from . import store
from .bim import HwConfig
from .errors import (CheckpointError, ContainerFormatError, FqbertError, NotCalibratedError,
                     PlanningError, ShapeError)
from .fakequant import weight_only_error
from .model import (AblationFlags, ModelConfig, float_oracle_forward, model_forward,
                    quantized_site_count)
from .qnum import qrange
from .sched import perf, resource_summary
from .synth import synthetic_tokens, synthetic_weights
from .verify import run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

ABLATION_ROWS = dict(AblationFlags.table_rows())
ABLATION_ROWS["all"] = AblationFlags()


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _model_config(args) -> ModelConfig:
    base = ModelConfig.toy() if args.config == "toy" else ModelConfig.bert_base()
    d = base.to_dict()
    for key, attr in (("num_layers", "layers"), ("hidden", "hidden"), ("heads", "heads"),
                      ("ffn_dim", "ffn"), ("seq_len", "seq"), ("vocab_size", "vocab"),
                      ("w_bits", "w_bits")):
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    return ModelConfig.from_dict(d)


def _hw(args, n: Optional[int] = None, m: Optional[int] = None, bw: Optional[float] = None,
        pus: Optional[int] = None) -> HwConfig:
    return HwConfig.make(pus=pus or args.pus, n=n or args.n, m=m or args.m, variant=args.variant,
                         clock_mhz=args.clock_mhz,
                         bandwidth_bytes_per_cycle=bw or args.bandwidth,
                         weight_buffer_bytes=args.weight_buffer)


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _inputs(args, mc: ModelConfig) -> list[list[int]]:
    if getattr(args, "ids", None):
        return [_ints(args.ids)]
    if getattr(args, "input", None):
        return store.read_calib_file(args.input)
    return synthetic_tokens(mc, args.num_inputs, args.seed)


def _fmt(x: float) -> str:
    return repr(float(x))


def _floats_for(args, mc: ModelConfig):
    if not getattr(args, "checkpoint", None):
        return None
    return store.import_float_checkpoint(args.checkpoint, mc)


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--config", choices=("toy", "bert-base"), default="toy")
    g.add_argument("--layers", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--ffn", type=int)
    g.add_argument("--seq", type=int)
    g.add_argument("--vocab", type=int)


def _add_hw_args(p, n_default="8"):
    g = p.add_argument_group("hardware")
    g.add_argument("--pus", type=int, default=12)
    g.add_argument("--n", type=int, default=int(n_default))
    g.add_argument("--m", type=int, default=16)
    g.add_argument("--variant", choices=("TypeA", "TypeB"), default="TypeA")
    g.add_argument("--clock-mhz", type=float, default=214.0)
    g.add_argument("--bandwidth", type=float, default=16.0, help="bytes per cycle")
    g.add_argument("--weight-buffer", type=int, default=512 * 1024,
                   help="bytes per weight-buffer half")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    mc = _model_config(args)
    fw = synthetic_weights(mc, args.seed)
    store.save_float_checkpoint(fw, args.out)
    print(f"wrote {args.out} ({len(fw.tensors)} tensors, seed {args.seed})")
    if args.calib_out:
        seqs = synthetic_tokens(mc, args.calib_count, args.seed + 1)
        Path(args.calib_out).write_text("".join(" ".join(map(str, s)) + "\n" for s in seqs))
        print(f"wrote {args.calib_out} ({len(seqs)} sequences)")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    fw = store.import_float_checkpoint(args.checkpoint)
    if not args.calib or not Path(args.calib).exists():
        raise NotCalibratedError("not calibrated: calibration file missing")
    specs = store.calibrate(fw, store.read_calib_file(args.calib), args.decay)
    Path(args.out).write_text(json.dumps(store.specs_to_json(specs), indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out} ({len(specs)} sites)")
    return EXIT_OK


def cmd_quantize(args) -> int:
    fw = store.import_float_checkpoint(args.checkpoint)
    specs = store.specs_from_json(json.loads(Path(args.specs).read_text()))
    with warnings.catch_warnings():
        warnings.simplefilter(args.warnings)
        c = store.quantize_model(fw, specs, args.w_bits)
    store.save(c, args.out)
    r = store.compression_report(c)
    print(f"wrote {args.out}")
    print(f"compression encoder-only: {r['encoder_ratio']:.2f}x "
          f"({r['encoder_float_bytes']} / {r['encoder_quant_bytes']} bytes)")
    print(f"compression with host tensors: {r['full_ratio']:.2f}x "
          f"({r['full_float_bytes']} / {r['full_quant_bytes']} bytes)")
    return EXIT_OK


def _flags(args) -> AblationFlags:
    if args.ablation not in ABLATION_ROWS:
        raise UsageError(f"unknown ablation row {args.ablation!r}; choose from "
                         + ", ".join(ABLATION_ROWS))
    return ABLATION_ROWS[args.ablation]


def cmd_infer(args) -> int:
    qm = store.from_container(store.load(args.container))
    mc = qm.config
    flags = _flags(args)
    floats = _floats_for(args, mc)
    if not flags.all_on and floats is None and not (flags.quant_scale and flags.quant_layernorm):
        raise UsageError(f"ablation row {args.ablation!r} needs --checkpoint with float weights")
    hw = _hw(args)
    status = EXIT_OK
    dumps = {}
    for j, ids in enumerate(_inputs(args, mc)):
        trace = {} if args.dump_intermediates else None
        if flags == AblationFlags.none():
            logits = float_oracle_forward(ids, floats)
        else:
            logits = model_forward(ids, qm, hw, flags, floats, trace)
        print("logits " + " ".join(_fmt(v) for v in logits))
        if trace is not None:
            lo, hi = qrange(8)
            for site, codes in trace.items():
                arr = np.asarray(codes)
                lo_s = 0 if site.endswith("probs") else lo
                hi_s = 255 if site.endswith("probs") else hi
                if arr.size and (arr.min() < lo_s or arr.max() > hi_s):
                    print(f"range violation at {site}: [{arr.min()}, {arr.max()}]")
                    status = EXIT_FAIL
                dumps[f"input{j}/{site}"] = arr
    if args.dump_intermediates:
        np.savez(args.dump_intermediates, **dumps)
        print(f"wrote {len(dumps)} site tensors to {args.dump_intermediates}")
    return status


def cmd_verify(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    qm = store.from_container(store.load(args.container)) if args.container else None
    results = run_suite(qm, args.trials, args.seed, inject_fault=args.inject_fault)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} properties failed")
        return EXIT_FAIL
    print(f"{len(results)} properties passed")
    return EXIT_OK


def cmd_ablate(args) -> int:
    qm = store.from_container(store.load(args.container))
    mc = qm.config
    floats = _floats_for(args, mc)
    if floats is None:
        raise UsageError("ablate needs --checkpoint with the float weights")
    inputs = _inputs(args, mc)
    refs = [float_oracle_forward(ids, floats) for ids in inputs]
    print(f"{'row':<30} {'sites':>6} {'mean_rel_delta':>16}")
    for name, flags in AblationFlags.table_rows():
        deltas = []
        for ids, ref in zip(inputs, refs):
            out = ref if name == "none" else model_forward(ids, qm, None, flags, floats)
            deltas.append(np.linalg.norm(out - ref) / max(np.linalg.norm(ref), 1e-30))
        print(f"{name:<30} {quantized_site_count(flags, mc):>6} {np.mean(deltas):>16.8f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    fw = store.import_float_checkpoint(args.checkpoint)
    inputs = _inputs(args, fw.config)
    print("k error")
    for k in _ints(args.bits):
        if k < 2:
            raise UsageError("bitwidths must be >= 2")
        print(f"{k} {weight_only_error(fw, k, inputs):.8f}")
    return EXIT_OK


def cmd_perf(args) -> int:
    mc = _model_config(args)
    reports = []
    for n in _ints(args.n_grid) if args.n_grid else [args.n]:
        for m in _ints(args.m_grid) if args.m_grid else [args.m]:
            for bw in ([float(b) for b in args.bw_grid.replace(",", " ").split()]
                       if args.bw_grid else [args.bandwidth]):
                hw = _hw(args, n=n, m=m, bw=bw)
                reports.append((hw, perf(mc, hw, args.tile_rows, args.prologue)))
    if args.json:
        print(json.dumps([r.to_dict() for _, r in reports], indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{'pus':>4} {'n':>4} {'m':>4} {'bw':>8} {'multipliers':>11} {'cycles':>12} "
          f"{'latency_ms':>12} {'fps':>10}")
    for hw, r in reports:
        print(f"{hw.num_pus:>4} {hw.pes_per_pu:>4} {hw.bim.M:>4} "
              f"{hw.bandwidth_bytes_per_cycle:>8g} {resource_summary(hw)['multipliers_8x4']:>11} "
              f"{r.cycles:>12} {r.latency_ms:>12.4f} {r.fps:>10.4f}")
    if args.detail:
        for _, r in reports:
            print()
            print(r.to_text())
    return EXIT_OK


def cmd_export_lut(args) -> int:
    qm = store.from_container(store.load(args.container))
    if not 0 <= args.layer < len(qm.layers):
        raise UsageError(f"layer {args.layer} out of range")
    Path(args.out).write_bytes(qm.layers[args.layer].exp_lut.to_bytes())
    print(f"wrote {args.out} (256 bytes)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fqbert", description="Fully quantized BERT toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic float checkpoint")
    _add_model_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--calib-out")
    p.add_argument("--calib-count", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="collect EMA activation ranges")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calib")
    p.add_argument("--decay", type=float, default=0.99)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="build an FQBT container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--specs", required=True)
    p.add_argument("--w-bits", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--warnings", choices=("default", "ignore", "error"), default="default")
    p.set_defaults(func=cmd_quantize)

    def _input_args(p):
        p.add_argument("--ids", help="one token-id sequence, space or comma separated")
        p.add_argument("--input", help="file of token-id sequences, one per line")
        p.add_argument("--num-inputs", type=int, default=4)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("infer", help="run a container")
    p.add_argument("--container", required=True)
    p.add_argument("--checkpoint", help="float weights, needed by partial ablation rows")
    p.add_argument("--ablation", default="all", help="one of: " + ", ".join(ABLATION_ROWS))
    p.add_argument("--dump-intermediates", metavar="NPZ")
    _input_args(p)
    _add_hw_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--container")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="logit deltas for each ablation row")
    p.add_argument("--container", required=True)
    p.add_argument("--checkpoint")
    _input_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="weight-bitwidth error sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", default="2,3,4,6,8,32")
    _input_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("perf", help="latency model")
    _add_model_args(p)
    p.set_defaults(config="bert-base")
    _add_hw_args(p)
    p.add_argument("--n-grid")
    p.add_argument("--m-grid")
    p.add_argument("--bw-grid")
    p.add_argument("--tile-rows", type=int)
    p.add_argument("--prologue", choices=("global", "per_stage"), default="global")
    p.add_argument("--detail", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_perf)

    p = sub.add_parser("export-lut", help="write one layer's softmax LUT as raw bytes")
    p.add_argument("--container", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_lut)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ContainerFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NotCalibratedError, UsageError, PlanningError, ShapeError, ValueError,
            FqbertError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
