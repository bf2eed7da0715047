"""Integer-only BERT inference with 4-bit weights and 8-bit activations.

Quantization primitives, a bit-interleaved multiplier model, integer softmax
and layer norm, an integer encoder, a container format and a cycle-level
latency model for the accelerator.
"""

__version__ = "0.1.0"
