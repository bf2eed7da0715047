"""Independent byte count of a quantized BERT encoder, from shapes alone.

Does not import the package.  Counts what the container stores per layer:
packed weights, 32-bit biases, Q1.6 LN gamma/beta, 2-byte scales for every
weight and activation site, and 8-byte requantization multipliers.  Derived
lookup tables are not parameters and are not counted.

    python scripts/byte_count_oracle.py --layers 12 --hidden 768 --ffn 3072 --w-bits 4
"""
import argparse
import math

LINEAR_SHAPES = ("qkvo", "ffn1", "ffn2")
ACT_SITES = 11          # q k v scores ctx attn_out ln1_out ffn1_out gelu_out ffn2_out ln2_out
REQUANT_ENTRIES = 8     # six linears, the score matrix, the context product
SCALE8_BYTES = 2
REQUANT_BYTES = 8


def packed_bytes(count, bits):
    if bits <= 2:
        return math.ceil(count / 4)
    if bits <= 4:
        return math.ceil(count / 2)
    return count


def layer_shapes(h, f):
    return [(h, h)] * 4 + [(f, h), (h, f)]


def encoder_bytes(layers, h, f, w_bits):
    """(float_bytes, quantized_bytes) of the encoder stack."""
    fl = q = 0
    for _ in range(layers):
        for rows, cols in layer_shapes(h, f):
            fl += 4 * rows * cols + 4 * rows
            q += packed_bytes(rows * cols, w_bits) + 4 * rows + SCALE8_BYTES
        fl += 4 * 4 * h          # two LNs, gamma and beta
        q += 4 * h               # Q1.6 codes
        q += ACT_SITES * SCALE8_BYTES + REQUANT_ENTRIES * REQUANT_BYTES
    return fl, q


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=12)
    ap.add_argument("--hidden", type=int, default=768)
    ap.add_argument("--ffn", type=int, default=3072)
    ap.add_argument("--w-bits", type=int, default=4)
    a = ap.parse_args()
    fl, q = encoder_bytes(a.layers, a.hidden, a.ffn, a.w_bits)
    print(f"float_bytes {fl}")
    print(f"quant_bytes {q}")
    print(f"ratio {fl / q:.4f}")


if __name__ == "__main__":
    main()
