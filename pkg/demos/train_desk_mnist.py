"""Train the reduced two-layer MNIST net and watch the soft zone collapse.

    python demos/train_desk_mnist.py --data-dir /root/data/mnist --out desk.ctn

Prints one line per epoch: phase, training loss, ambiguous fraction f, the
per-layer sigmoid half-widths t and the mean number of active words per table.
The last column should fall towards 1 as training turns hard.
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

from ctnet.cli import load_split
from ctnet.data import save_model
from ctnet.network import build, desk_mnist_spec, evaluate
from ctnet.training import desk_config, train_three_phase


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--data-dir", required=True)
    p.add_argument("--train-limit", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="desk.ctn")
    args = p.parse_args()

    train = load_split("mnist", args.data_dir, "train", args.train_limit)
    test = load_split("mnist", args.data_dir, "test")
    net = build(desk_mnist_spec(), seed=args.seed, threshold_sigma=0.25)

    def show(row):
        ts = " ".join(f"{t:.3g}" for t in row["t"])
        print(f"epoch {row['epoch']:2d} phase {row['phase']}  loss {row['loss']:.4f}  "
              f"train-err {row['train_err']:.4f}  f {row['f']:.4f}  t [{ts}]  words {row['active_words']:.3f}")

    start = time.perf_counter()
    net, _ = train_three_phase(net, train, desk_config(seed=args.seed), callback=show)
    print(f"trained in {time.perf_counter() - start:.0f}s")
    print(f"hard test error {evaluate(net, test):.4f} on {len(test)} digits")
    Path(args.out).write_bytes(save_model(net))
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()
