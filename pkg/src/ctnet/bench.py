"""Operation-count and memory models for CT layers, plus a wall-clock harness.

Counts are per output location unless stated otherwise.  A CT layer costs
``M * (c_b * K + D_o)`` operations per location: each of the M*K bit-functions
costs ``c_b`` (two bilinear samples, a subtraction and a comparison) and each
table contributes one D_o-wide vector add.  A dense convolution costs
``l^2 * D_i * D_o``, so with the reuse factor ``R = M*K/D`` the ratio of the two
is independent of the patch size for CT layers and quadratic in it for convolutions.
"""
from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .fern import SoftConfig
from .layer import CTLayer, forward_hard, forward_soft
from .network import CostReport, Network, forward, network_cost
from .tensor import DomainError

__all__ = [
    "CostReport", "SpeedupReport", "TimingReport", "cost_cnn", "cost_ct", "speedup_ratio",
    "memory_model", "wall_bench", "network_cost", "sweep_rows", "write_csv", "CSV_HEADER",
]

BYTES_PER_ENTRY = {"f32": 4, "i8": 1}
BIT_PARAM_BYTES = 4
CSV_HEADER = ("config", "ops_cnn", "ops_ct", "ratio", "params", "bytes", "median_ns")


def _positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise DomainError(f"{name} must be positive, got {v}")


def cost_cnn(l: int, d_in: int, d_out: int) -> int:
    _positive(l=l, d_in=d_in, d_out=d_out)
    return l * l * d_in * d_out


def cost_ct(M: int, K: int, d_out: int, c_b: float = 10) -> float:
    _positive(M=M, K=K, d_out=d_out, c_b=c_b)
    return M * (c_b * K + d_out)


@dataclass(frozen=True)
class SpeedupReport:
    exact: float
    asymptote: float

    @property
    def relative_gap(self) -> float:
        return abs(self.asymptote - self.exact) / self.asymptote


def speedup_ratio(l: float, K: float, R: float, D: float, c_b: float = 10) -> SpeedupReport:
    """CNN/CT cost ratio for D input and output channels at reuse factor R.

    The exact value is ``l^2 D^2 / (c_b D R + D^2 R / K)``; as D grows it tends
    to ``K l^2 / R``.
    """
    _positive(l=l, K=K, R=R, D=D, c_b=c_b)
    exact = (l * l * D * D) / (c_b * D * R + D * D * R / K)
    return SpeedupReport(exact=exact, asymptote=K * l * l / R)


def memory_model(layers: Iterable[Sequence], precision: str = "f32", tables_only: bool = False) -> int:
    """Bytes for a list of ``(M, K, D_o, bit_param_count)`` layer descriptions.

    Table entries take 4 bytes (f32) or 1 byte (i8); bit-function parameters are
    always kept at 4 bytes.  Per-table quantisation scales are not counted.
    """
    try:
        per_entry = BYTES_PER_ENTRY[precision]
    except KeyError:
        raise DomainError(f"precision must be one of {sorted(BYTES_PER_ENTRY)}, got {precision!r}") from None
    total = 0
    for desc in layers:
        M, K, d_out = desc[:3]
        bit_params = desc[3] if len(desc) > 3 else 5 * M * K
        total += M * 2**K * d_out * per_entry
        if not tables_only:
            total += bit_params * BIT_PARAM_BYTES
    return int(total)


@dataclass(frozen=True)
class TimingReport:
    median_ns: float
    p10_ns: float
    p90_ns: float
    total_s: float
    locations: int
    repetitions: int


def _pin_single_cpu():
    if hasattr(os, "sched_getaffinity"):
        cpus = sorted(os.sched_getaffinity(0))
        try:
            os.sched_setaffinity(0, {cpus[0]})
        except OSError:
            pass
        return cpus
    return None


def wall_bench(target: Network | CTLayer, input_shape: tuple, repetitions: int = 5, seed: int = 0,
               mode: str | SoftConfig = "hard") -> TimingReport:
    """Time forward passes on a seeded random input; per-location figures in nanoseconds.

    ``target`` is a whole network or a single CT layer.  One untimed warm-up pass
    triggers kernel compilation.  The process is pinned to one CPU while timing.
    """
    if repetitions < 3:
        raise DomainError("need at least 3 repetitions")
    x = np.random.default_rng(seed).random(input_shape)
    if isinstance(target, CTLayer):
        if mode == "hard":
            run = lambda: forward_hard(x, target)
        else:
            run = lambda: forward_soft(x, target, mode)
        ho, wo, _ = target.output_shape(input_shape[0], input_shape[1])
        locations = ho * wo
    else:
        run = lambda: forward(target, x, mode)
        locations = sum(shape[0] * shape[1] for ls, shape in zip(target.spec.layers, target.spec.shapes())
                        if ls.kind == "ct")
    saved = _pin_single_cpu()
    try:
        run()
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            run()
            samples.append(time.perf_counter_ns() - t0)
    finally:
        if saved is not None:
            try:
                os.sched_setaffinity(0, set(saved))
            except OSError:
                pass
    per_loc = np.asarray(samples, dtype=np.float64) / locations
    p10, med, p90 = np.percentile(per_loc, [10, 50, 90])
    return TimingReport(float(med), float(p10), float(p90), sum(samples) / 1e9, locations, repetitions)


def sweep_rows(ls: Sequence[int], Ks: Sequence[int], Ms: Sequence[int], d_in: int, d_out: int,
               size: int = 32, c_b: float = 10, repetitions: int = 5, seed: int = 0, precision: str = "i8",
               timed: bool = True):
    """One CSV row per single-layer configuration (valid padding on a size x size input)."""
    rows = []
    for l in ls:
        for K in Ks:
            for M in Ms:
                layer = CTLayer.random(np.random.default_rng(seed), d_in, l, K, M, d_out)
                ops_ct = cost_ct(M, K, d_out, c_b)
                ops_cnn = cost_cnn(l, d_in, d_out)
                med = float("nan")
                if timed:
                    med = wall_bench(layer, (size, size, d_in), repetitions, seed).median_ns
                rows.append({
                    "config": f"l={l};K={K};M={M};Di={d_in};Do={d_out}",
                    "ops_cnn": ops_cnn, "ops_ct": ops_ct, "ratio": ops_cnn / ops_ct,
                    "params": layer.param_count(),
                    "bytes": memory_model([(M, K, d_out, 5 * M * K)], precision),
                    "median_ns": med,
                })
    return rows


def write_csv(rows, stream: io.TextIOBase | None = None) -> str:
    """Write rows with the fixed header; returns the text when no stream is given."""
    out = stream or io.StringIO()
    w = csv.DictWriter(out, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return out.getvalue() if stream is None else ""
