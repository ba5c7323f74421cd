"""Shrink a model to 8-bit tables and measure what it changes.

    python demos/quantize_model.py [model.ctn] [--data-dir /root/data/mnist]

Without a model file a random desk-sized net is used.  For each of a few
inputs the script prints the largest logit change next to the guaranteed
bound; with a data directory it also compares test error before and after.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from ctnet.cli import load_split
from ctnet.data import load_model, quantized_logit_bound, save_model
from ctnet.network import build, desk_mnist_spec, evaluate, forward


def main():
    p = argparse.ArgumentParser()
    p.add_argument("model", nargs="?")
    p.add_argument("--data-dir")
    args = p.parse_args()

    net = load_model(Path(args.model).read_bytes()) if args.model else build(desk_mnist_spec(), seed=0)
    f32, i8 = save_model(net), save_model(net, quantized=True)
    small = load_model(i8)
    print(f"float32 container {len(f32):,} bytes, 8-bit container {len(i8):,} bytes")

    rng = np.random.default_rng(0)
    for k in range(5):
        x = rng.random(net.spec.input)
        err = np.abs(forward(small, x) - forward(net, x)).max()
        print(f"input {k}: max logit change {err:.2e}, bound {quantized_logit_bound(net, x).max():.2e}")

    if args.data_dir:
        test = load_split("mnist", args.data_dir, "test")
        print(f"test error float32 {evaluate(net, test):.4f}, 8-bit {evaluate(small, test):.4f}")


if __name__ == "__main__":
    main()
