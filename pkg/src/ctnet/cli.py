"""Command-line entry point: ``ctnet {train,eval,bench,verify,export}``.

Exit codes: 0 success, 1 a verification or acceptance check failed, 2 bad usage
or unreadable input.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, theory
from .data import (ParseError, load_cifar10, load_mnist, load_model, load_teacher_logits, save_model,
                   serialized_param_count)
from .fern import SoftConfig
from .network import (BuildError, NetworkSpec, build, desk_mnist_spec, evaluate, face_spec, format_config,
                      four_layer_spec, network_cost, parse_config, six_layer_spec, two_layer_mnist_spec)
from .tensor import DomainError
from .training import AnnealSchedule, DistillConfig, TrainConfig, train_three_phase

log = logging.getLogger("ctnet")

PRESETS = {
    "desk-mnist": desk_mnist_spec,
    "mnist-2layer": two_layer_mnist_spec,
    "cifar-4layer": four_layer_spec,
    "cifar-6layer": six_layer_spec,
    "face": face_spec,
}
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
METRIC_COLUMNS = ("epoch", "phase", "loss", "train-err", "val-err", "f", "t", "mean-active-words")


class UsageError(Exception):
    """Bad flags or missing inputs (exit code 2)."""


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {exc}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise UsageError(f"--data-dir: {directory} has no {name}")


def load_split(kind: str, data_dir: str | None, split: str, limit: int | None = None):
    if data_dir is None:
        raise UsageError("--data-dir is required")
    directory = Path(data_dir)
    if not directory.is_dir():
        raise UsageError(f"--data-dir: {directory} is not a directory")
    if kind == "mnist":
        images, labels = MNIST_FILES[split]
        ds = load_mnist(_find(directory, images), _find(directory, labels))
    else:
        ds = load_cifar10([_find(directory, f) for f in CIFAR_FILES[split]])
    if len(ds) == 0:
        raise UsageError(f"--data-dir: {directory} holds an empty {split} split")
    if limit is not None:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    return ds


def resolve_spec(args) -> NetworkSpec:
    if args.arch is not None:
        try:
            spec = parse_config(Path(args.arch).read_text())
        except OSError as exc:
            raise UsageError(f"--arch: {exc}") from None
    elif args.preset == "desk-mnist":
        kw = {k: v for k, v in (("l", args.l), ("K", args.K), ("M", args.M)) if v is not None}
        return desk_mnist_spec(**kw)
    else:
        spec = PRESETS[args.preset]()
    overrides = {k: v for k, v in (("l", args.l), ("K", args.K), ("M", args.M)) if v is not None}
    if overrides:
        spec = NetworkSpec(spec.input, [replace(ls, **overrides) if ls.kind == "ct" else ls for ls in spec.layers],
                           spec.classes)
    return spec


def write_metrics(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            val = row.get("val_err")
            w.writerow([row["epoch"], row["phase"], f"{row['loss']:.6f}", f"{row['train_err']:.6f}",
                        "" if val is None else f"{val:.6f}", f"{row['f']:.6g}",
                        ";".join(f"{t:.6g}" for t in row["t"]), f"{row['active_words']:.6f}"])


def cmd_train(args) -> int:
    stage = "configure"
    try:
        spec = resolve_spec(args)
        spec.validate()
        anneal = AnnealSchedule(f0=args.f0, decay=args.decay, recalib_period=args.recalib_period,
                                f_floor=args.f_floor, t0=args.t0)
        distill = DistillConfig(alpha=args.alpha, temp_start=args.temp, temp_end=args.temp_end) \
            if args.teacher else None
        if len(args.epochs) != 3:
            raise UsageError("--epochs needs three comma-separated counts (one per phase)")
        cfg = TrainConfig(epochs=tuple(args.epochs), batch_size=args.batch_size, lr=args.lr,
                          momentum=args.momentum, anneal=anneal, distill=distill, seed=args.seed,
                          workers=args.workers, final_lr_ratio=args.final_lr_ratio)
        stage = "load data"
        train = load_split(args.dataset, args.data_dir, "train", args.train_limit)
        val = load_split(args.dataset, args.data_dir, "test", args.val_limit) if args.val_limit != 0 else None
        teacher = None
        if args.teacher:
            teacher = load_teacher_logits(args.teacher, spec.classes)
        stage = "build"
        net = build(spec, args.seed, threshold_sigma=args.threshold_sigma)
        stage = "train"
        net, history = train_three_phase(net, train, cfg, teacher=teacher, eval_data=val)
        stage = "write outputs"
        Path(args.out_model).write_bytes(save_model(net))
        write_metrics(Path(args.metrics), history)
    except (UsageError, ParseError, BuildError, OSError) as exc:
        raise UsageError(f"stage '{stage}': {exc}") from None
    except DomainError as exc:
        raise StageError(stage, exc) from None
    last = history[-1]
    print(f"trained {len(history)} epochs; final train-err {last['train_err']:.4f}"
          + (f", val-err {last['val_err']:.4f}" if "val_err" in last else ""))
    return 0


def _load_model_file(path: str):
    try:
        return load_model(Path(path).read_bytes())
    except (OSError, ParseError) as exc:
        raise UsageError(f"--model: {exc}") from None


def cmd_eval(args) -> int:
    net = _load_model_file(args.model)
    try:
        ds = load_split(args.dataset, args.data_dir, args.split, args.limit)
    except (ParseError, OSError) as exc:
        raise UsageError(f"--data-dir: {exc}") from None
    mode = "hard" if args.mode == "hard" else SoftConfig(args.t, 0.0)
    if mode != "hard":
        mode = [mode] * len(net.ct_layers)
    err = evaluate(net, ds, mode)
    print(f"{args.mode} error {err:.6f} on {len(ds)} examples")
    return 0


def cmd_bench(args) -> int:
    if args.model:
        net = _load_model_file(args.model)
        rep = network_cost(net, args.c_b)
        timing = bench.wall_bench(net, net.spec.input, args.reps, args.seed) if not args.no_time else None
        bench.write_csv([{
            "config": Path(args.model).name, "ops_cnn": rep.ops_cnn, "ops_ct": rep.ops_ct, "ratio": rep.ratio,
            "params": rep.params, "bytes": rep.bytes_i8 if args.precision == "i8" else rep.bytes_f32,
            "median_ns": timing.median_ns if timing else float("nan"),
        }], sys.stdout)
        return 0
    rows = bench.sweep_rows(args.l, args.K, args.M, args.d_in, args.d_out, args.size, args.c_b, args.reps,
                            args.seed, args.precision, timed=not args.no_time)
    bench.write_csv(rows, sys.stdout)
    return 0


def cmd_verify(args) -> int:
    results = [theory.check_shattering(K, args.labelings, args.seed) for K in range(args.k_min, args.k_max + 1)]
    results.append(theory.check_rectangles(args.rects, args.points, args.seed, args.max_boxes))
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.ok for r in results) else 1


def cmd_export(args) -> int:
    net = _load_model_file(args.model)
    if args.config:
        Path(args.config).write_text(format_config(net.spec))
    if args.out:
        buf = save_model(net, quantized=args.quantized)
        Path(args.out).write_bytes(buf)
        print(f"wrote {len(buf)} bytes, {serialized_param_count(buf)} parameters")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctnet", description="Convolutional-table networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="three-phase training")
    arch = t.add_mutually_exclusive_group()
    arch.add_argument("--arch", help="architecture config file")
    arch.add_argument("--preset", choices=sorted(PRESETS), default="desk-mnist")
    t.add_argument("--l", type=int, help="patch size for every CT layer")
    t.add_argument("--K", type=int, help="bits per fern for every CT layer")
    t.add_argument("--M", type=int, help="tables per CT layer")
    t.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    t.add_argument("--data-dir")
    t.add_argument("--train-limit", type=int, default=10_000)
    t.add_argument("--val-limit", type=int, default=None, help="0 disables per-epoch validation")
    t.add_argument("--epochs", type=_ints, default=[1, 2, 7], help="epochs per phase, e.g. 1,2,7")
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1.0)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--final-lr-ratio", type=float, default=0.05)
    t.add_argument("--threshold-sigma", type=float, default=0.25)
    t.add_argument("--f0", type=float, default=0.2)
    t.add_argument("--decay", type=float, default=0.69)
    t.add_argument("--f-floor", type=float, default=0.005)
    t.add_argument("--recalib-period", type=int, default=50, help="steps between t recalibrations")
    t.add_argument("--t0", type=float, default=None, help="fixed t for the first epoch")
    t.add_argument("--teacher", help="teacher logit file; enables distillation in phase 3")
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--temp", type=float, default=4.0)
    t.add_argument("--temp-end", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    t.add_argument("--out-model", required=True)
    t.add_argument("--metrics", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="error rate of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    e.add_argument("--data-dir")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--limit", type=int)
    e.add_argument("--mode", choices=("hard", "soft"), default="hard")
    e.add_argument("--t", type=float, default=1e-9, help="soft-mode t for every layer")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="cost model and timing sweep as CSV")
    b.add_argument("--model", help="report a saved model instead of a sweep")
    b.add_argument("--l", type=_ints, default=[3, 5, 7, 9])
    b.add_argument("--K", type=_ints, default=[6])
    b.add_argument("--M", type=_ints, default=[8])
    b.add_argument("--d-in", type=int, default=16)
    b.add_argument("--d-out", type=int, default=16)
    b.add_argument("--size", type=int, default=32)
    b.add_argument("--c-b", type=float, default=10.0)
    b.add_argument("--precision", choices=("f32", "i8"), default="i8")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--no-time", action="store_true")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="shattering and box-network checks")
    v.add_argument("--k-min", type=int, default=1)
    v.add_argument("--k-max", type=int, default=6)
    v.add_argument("--labelings", type=int, default=1000, help="random labelings for K > 4")
    v.add_argument("--rects", type=int, default=20, help="random box-sum instances")
    v.add_argument("--max-boxes", type=int, default=3)
    v.add_argument("--points", type=int, default=10_000)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    x = sub.add_parser("export", help="re-encode a model or dump its architecture")
    x.add_argument("--model", required=True)
    x.add_argument("--out")
    x.add_argument("--quantized", action="store_true", help="8-bit tables (CTq1)")
    x.add_argument("--config", help="write the architecture config here")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ctnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ParseError, BuildError) as exc:
        print(f"ctnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (StageError, DomainError) as exc:
        print(f"ctnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
