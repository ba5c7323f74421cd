"""Two small exact constructions, checked by brute force.

    python demos/theory_checks.py

1. A fern of K threshold bits gives 2^K distinct words on the cube vertices,
   so a free table can realize any labelling of them.
2. Two layers of one-bit ferns add up weighted box indicators exactly.
"""
from __future__ import annotations

import numpy as np

from ctnet.theory import (RectangleSpec, build_rectangle_network, build_shatter_instance, check_rectangles,
                          check_shattering, step_function)


def main():
    fern, sample = build_shatter_instance(3)
    print("K=3 sample points and their words:")
    for x, w in zip(sample, fern.words(sample)):
        print(f"  {x} -> {w}")
    for K in range(1, 7):
        r = check_shattering(K)
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")

    boxes = [RectangleSpec((0.1, 0.1), (0.5, 0.6), 2.0), RectangleSpec((0.4, 0.3), (0.9, 0.8), -1.0)]
    net = build_rectangle_network(boxes, 2)
    probes = np.array([[0.2, 0.2], [0.45, 0.5], [0.7, 0.7], [0.95, 0.05]])
    print("\nbox sum at a few points (network vs direct):")
    for x, u, v in zip(probes, net(probes), step_function(boxes, probes)):
        print(f"  {x} -> {u:+.0f} / {v:+.0f}   hidden counts {net.hidden(x[None])[0]}")
    r = check_rectangles()
    print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")


if __name__ == "__main__":
    main()
