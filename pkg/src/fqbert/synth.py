"""Seeded synthetic checkpoints and calibration data.

Distributions: every weight matrix, bias, embedding table and LN beta is
uniform in [-0.5, 0.5]; LN gamma is uniform in [0.5, 1.5].  Values are drawn
in schema order from one ``numpy.random.default_rng(seed)`` stream.
"""
from __future__ import annotations

import numpy as np

from .model import FloatWeights, ModelConfig, tensor_schema


def synthetic_weights(mc: ModelConfig, seed: int = 0) -> FloatWeights:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_schema(mc).items():
        if name.endswith(".gamma"):
            arr = rng.uniform(0.5, 1.5, size=shape)
        else:
            arr = rng.uniform(-0.5, 0.5, size=shape)
        tensors[name] = arr.astype(np.float32)
    return FloatWeights(mc, tensors)


def synthetic_tokens(mc: ModelConfig, count: int, seed: int = 0,
                     seq_len: int | None = None) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    n = seq_len or mc.seq_len
    return [rng.integers(0, mc.vocab_size, size=n).tolist() for _ in range(count)]
