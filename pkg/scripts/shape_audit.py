"""Check the paper-preset layer stack against plain shape arithmetic.

The expected numbers are derived here with integer arithmetic only
(3x3 convolutions with stride 1 and padding 1 keep extents; 2x2 pooling
floors), independently of the network code, and then compared with what
the built network reports layer by layer.
"""

import sys

from msicnn.network import build, paper_preset
from msicnn.rng import stream

BLOCKS = [(32, 2), (64, 2), (128, 3), (256, 3)]
FC = [1024, 1024, 4]


def expected_stack(h, w, c):
    rows = []
    for filters, count in BLOCKS:
        for _ in range(count):
            rows.append(("conv", (h, w, filters), 9 * c * filters + filters))
            c = filters
        h, w = h // 2, w // 2
        rows.append(("maxpool", (h, w, c), 0))
    width = h * w * c
    for units in FC:
        rows.append(("dense", (units,), width * units + units))
        width = units
    return rows


def audit(shape):
    net = build(paper_preset(shape), stream(0, "init"))
    actual = []
    current = shape
    for layer in net.layers:
        current = layer.output_shape(current)
        if layer.kind in ("conv", "maxpool", "dense"):
            params = sum(p.size for p in layer.params.values())
            actual.append((layer.kind, tuple(current), params))
    expected = expected_stack(*shape)
    print(f"input {shape}:")
    ok = True
    for exp, act in zip(expected, actual):
        match = exp == act
        ok &= match
        print(f"  {'ok ' if match else 'BAD'} {exp[0]:8s} {str(exp[1]):16s} params {exp[2]:>10,d}"
              + ("" if match else f"   got {act}"))
    ok &= len(expected) == len(actual)
    weighted = sum(1 for k, _, _ in expected if k != "maxpool")
    print(f"  flatten width {net.flatten_width}, weighted layers {weighted}, parameters {net.parameter_count():,d}")
    return ok


if __name__ == "__main__":
    good = audit((128, 128, 16)) & audit((128, 60, 42))
    print("shape audit", "passed" if good else "FAILED")
    sys.exit(0 if good else 1)
