"""Regenerate tests/data/golden_toy.json from the fake-quant reference.

Mirrors the CLI pipeline: ``synth --seed 0`` (calibration tokens from seed 1),
``calibrate``, ``quantize --w-bits 4``, then runs the real-arithmetic engine
on fixed inputs.  The integer path is checked against this file in tests.
"""
import json
import warnings
from pathlib import Path

from fqbert.model import ModelConfig, fake_quant_forward
from fqbert.store import calibrate, from_container, quantize_model
from fqbert.synth import synthetic_tokens, synthetic_weights

INPUTS = [[1, 2, 3, 4], [10, 20, 30, 40, 0, 49, 7, 7], [5]]


def main():
    mc = ModelConfig.toy()
    fw = synthetic_weights(mc, 0)
    specs = calibrate(fw, synthetic_tokens(mc, 4, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        qm = from_container(quantize_model(fw, specs, 4))
    out = {"seed": 0, "w_bits": 4, "inputs": INPUTS,
           "logits": [[repr(float(v)) for v in fake_quant_forward(ids, qm)] for ids in INPUTS]}
    path = Path(__file__).resolve().parents[1] / "tests" / "data" / "golden_toy.json"
    path.write_text(json.dumps(out, indent=2) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
