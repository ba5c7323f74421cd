"""Where a CT layer saves work, and what it costs in memory.

    python demos/cost_tradeoffs.py

A convolution spends l*l*D_in*D_out multiply-adds per location.  A CT layer
spends M*(c_b*K + D_out): K bit evaluations and one table row add per fern,
whatever the patch size.  The first table shows the ratio approaching its
large-D limit; the second times real layers at growing l.
"""
from __future__ import annotations

import numpy as np

from ctnet.bench import cost_cnn, cost_ct, memory_model, speedup_ratio, wall_bench
from ctnet.layer import CTLayer


def main():
    print("speedup for l=3, K=8, R=2 (R = bit functions reading each input channel)")
    print(f"{'D':>6} {'exact':>8} {'limit':>6} {'gap':>7}")
    for D in (32, 128, 512, 2048, 8192):
        r = speedup_ratio(3, 8, 2, D)
        print(f"{D:6d} {r.exact:8.3f} {r.asymptote:6.1f} {r.relative_gap:7.2%}")

    print("\nper-location ops and measured time, D_in = D_out = 16, K=6, M=8")
    print(f"{'l':>3} {'cnn ops':>8} {'ct ops':>7} {'ns/loc':>8}")
    for l in (3, 5, 7, 9):
        layer = CTLayer.random(np.random.default_rng(l), 16, l, 6, 8, 16)
        ns = wall_bench(layer, (32, 32, 16), repetitions=5).median_ns
        print(f"{l:3d} {cost_cnn(l, 16, 16):8d} {cost_ct(8, 6, 16):7.0f} {ns:8.0f}")

    tables = memory_model([(10, 6, 60)] * 50, "i8", tables_only=True)
    print(f"\n50 layers of M=10, K=6, D=60 with 8-bit tables: {tables:,} bytes")
    print(f"same at float32: {memory_model([(10, 6, 60)] * 50, 'f32', tables_only=True):,} bytes")


if __name__ == "__main__":
    main()
