"""Gradient-based training of soft CT networks.

The forward pass runs every CT layer in soft mode with its own sigmoid
half-width t; the annealer shrinks t so that only a fraction f of bit values
stays inside the soft zone, and f itself decays exponentially until the
network is effectively hard.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fern import SoftConfig, calibrate_t
from .layer import CTLayer, ForwardCache, forward_soft, layer_backward
from .network import Network, evaluate
from .tensor import DomainError, avg_pool, avg_pool_backward

log = logging.getLogger(__name__)

T_MIN = 1e-9


@dataclass
class GradientBundle:
    d_input: np.ndarray | None
    d_offsets: np.ndarray
    d_thresholds: np.ndarray
    d_tables: np.ndarray

    @property
    def d_params(self) -> np.ndarray:
        """(M, K, 5) view of dx1, dy1, dx2, dy2, th gradients."""
        return np.concatenate([self.d_offsets, self.d_thresholds[..., None]], axis=-1)

    def __iadd__(self, other: "GradientBundle"):
        self.d_offsets += other.d_offsets
        self.d_thresholds += other.d_thresholds
        self.d_tables += other.d_tables
        return self


def backward_soft_ct(cache: ForwardCache, d_out: np.ndarray, want_input: bool = True) -> GradientBundle:
    """Chain rule through the sparse vote, the soft word activities and bilinear sampling."""
    return GradientBundle(*layer_backward(cache, d_out, want_input))


# -- losses -----------------------------------------------------------------------

def softmax(z, temp: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / temp
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(z, temp: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / temp
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def cross_entropy(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise DomainError(f"label {label} outside [0, {logits.size})")
    return float(-log_softmax(logits)[label])


def cross_entropy_grad(logits, label: int) -> np.ndarray:
    g = softmax(logits)
    g[label] -= 1.0
    return g


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    temp_start: float = 4.0
    temp_end: float = 1.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise DomainError("alpha must lie in [0, 1]")
        if min(self.temp_start, self.temp_end) < 1:
            raise DomainError("distillation temperature must stay >= 1")

    def temperature(self, progress: float) -> float:
        """Linear schedule; progress runs from 0 to 1 over the distillation epochs."""
        progress = min(max(progress, 0.0), 1.0)
        return self.temp_start + (self.temp_end - self.temp_start) * progress


def distill_loss(logits, teacher_logits, cfg: DistillConfig, label: int, temp: float | None = None) -> float:
    """alpha * CE + (1 - alpha) * temp^2 * KL(teacher || student), both softened by temp."""
    logits = np.asarray(logits, dtype=np.float64)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if logits.shape != teacher_logits.shape:
        raise DomainError(f"student has {logits.size} logits, teacher {teacher_logits.size}")
    temp = cfg.temp_start if temp is None else temp
    p_t = softmax(teacher_logits, temp)
    kl = float(np.sum(p_t * (log_softmax(teacher_logits, temp) - log_softmax(logits, temp))))
    return cfg.alpha * cross_entropy(logits, label) + (1 - cfg.alpha) * temp**2 * max(kl, 0.0)


def distill_grad(logits, teacher_logits, cfg: DistillConfig, label: int, temp: float) -> np.ndarray:
    g = cfg.alpha * cross_entropy_grad(logits, label)
    g += (1 - cfg.alpha) * temp * (softmax(logits, temp) - softmax(teacher_logits, temp))
    return g


# -- optimiser ----------------------------------------------------------------------

def sgd_step(params, grads, velocity, lr: float, momentum: float = 0.9):
    """In-place heavy-ball step: v = momentum * v + g; p -= lr * v."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= (lr * v).astype(p.dtype, copy=False)
    return params


@dataclass
class LayerOptimizer:
    """Momentum SGD state for one CT layer with per-parameter-class step sizes."""
    layer: CTLayer
    lr_scale: tuple = (1.0, 1.0, 1.0)     # offsets, thresholds, tables
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        self.velocity = [np.zeros(a.shape) for a in self._params()]

    def _params(self):
        return [self.layer.offsets, self.layer.thresholds, self.layer.tables]

    def step(self, bundle: GradientBundle, lr: float, momentum: float) -> None:
        grads = [bundle.d_offsets, bundle.d_thresholds, bundle.d_tables]
        for p, g, v, s in zip(self._params(), grads, self.velocity, self.lr_scale):
            sgd_step([p], [g], [v], lr * s, momentum)
        self.layer.clamp_offsets()


# -- annealing ----------------------------------------------------------------------

@dataclass(frozen=True)
class AnnealSchedule:
    f0: float = 0.2
    decay: float = 0.85
    recalib_period: int | None = None   # steps between recalibrations; None = once per epoch
    f_floor: float = 0.005
    t0: float | None = None   # fixed t during the first epoch instead of calibrating from f0

    def __post_init__(self):
        if self.t0 is not None and not self.t0 > 0:
            raise DomainError("t0 must be positive")
        if not 0 < self.f_floor < self.f0 < 1:
            raise DomainError("need 0 < f_floor < f0 < 1")
        if not 0 < self.decay < 1:
            raise DomainError("decay must lie in (0, 1)")

    def fraction(self, epoch: float) -> float:
        return max(self.f0 * self.decay**epoch, self.f_floor)


def anneal_step(schedule: AnnealSchedule, epoch: float, observed) -> tuple[float, float]:
    """Ambiguous fraction for ``epoch`` (may be fractional) and the matching t."""
    f = schedule.fraction(epoch)
    observed = np.asarray(observed).ravel()
    if observed.size == 0:
        raise DomainError("no bit values observed at a recalibration point")
    return f, max(calibrate_t(observed, f), T_MIN)


# -- network-level forward / backward ----------------------------------------------------

def forward_train(net: Network, image, cfgs, upto: int | None = None):
    """Soft forward through ``net.layers[:upto]`` keeping what backward needs."""
    x = np.asarray(image, dtype=np.float64)
    it = iter(cfgs)
    trace = []
    for layer in net.layers[:upto]:
        if isinstance(layer, CTLayer):
            y, cache = forward_soft(x, layer, next(it))
            trace.append(cache)
        else:
            y = avg_pool(x, layer.l, layer.stride)
            trace.append(x.shape)
        x = y
    return x, trace


def backward_train(net: Network, trace, d_out, trainable, upto: int | None = None, slope_scale=None):
    """Backpropagate ``d_out``; returns {ct-layer index: GradientBundle} for trainable layers.

    ``slope_scale[j]`` multiplies every gradient that passed through CT layer j's
    soft ramps (its bit parameters and the gradient sent to its input).  Passing
    2t per layer turns each ramp slope 1/(2t) into 1, which keeps step sizes
    bounded while t is annealed towards zero.
    """
    layers = net.layers[:upto]
    ct_index = [i for i, layer in enumerate(net.layers) if isinstance(layer, CTLayer)]
    lowest = min((ct_index.index(i) for i in range(len(layers)) if i in ct_index
                  and trainable[ct_index.index(i)]), default=None)
    grads = {}
    g = d_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if isinstance(layer, CTLayer):
            j = ct_index.index(i)
            if lowest is None or j < lowest:
                break
            bundle = backward_soft_ct(trace[i], g, want_input=j > lowest)
            if slope_scale is not None:
                bundle.d_offsets *= slope_scale[j]
                bundle.d_thresholds *= slope_scale[j]
                if bundle.d_input is not None:
                    bundle.d_input *= slope_scale[j]
            if trainable[j]:
                grads[j] = bundle
            if j == lowest:
                break
            g = bundle.d_input
        else:
            g = avg_pool_backward(g, trace[i], layer.l, layer.stride)
    return grads


def grouped_head(features: np.ndarray, classes: int) -> np.ndarray:
    """Parameter-free classifier head: global mean of channels grouped by index mod classes."""
    d = features.shape[2]
    if d < classes:
        raise DomainError(f"temporary head needs at least {classes} channels, got {d}")
    pooled = features.mean(axis=(0, 1))
    counts = np.bincount(np.arange(d) % classes, minlength=classes)
    return np.bincount(np.arange(d) % classes, weights=pooled, minlength=classes) / counts


def grouped_head_backward(d_logits, shape, classes: int) -> np.ndarray:
    h, w, d = shape
    groups = np.arange(d) % classes
    counts = np.bincount(groups, minlength=classes)
    per_channel = d_logits[groups] / counts[groups] / (h * w)
    return np.broadcast_to(per_channel, shape).copy()


# -- three-phase driver ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: tuple = (1, 2, 7)
    batch_size: int = 32
    lr: float = 1.0
    momentum: float = 0.9
    lr_scale: tuple = (1.0, 0.1, 2.0)   # offsets, thresholds, tables
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    distill: DistillConfig | None = None
    prune_eps: float = 1e-8
    calib_images: int = 32
    monitor_images: int = 32
    seed: int = 0
    workers: int = 1
    final_lr_ratio: float = 0.05  # phase 3 lr follows a cosine from lr down to lr * ratio
    normalize_by_t: bool = True   # unit ramp slopes in the training surrogate, see backward_train


def desk_config(**overrides) -> TrainConfig:
    """Settings for the reduced MNIST net: 10 epochs, f reaching its floor in the last one."""
    base = dict(anneal=AnnealSchedule(decay=0.69, recalib_period=50))
    base.update(overrides)
    return TrainConfig(**base)


def split_lower_upper(net: Network) -> int:
    """Index into ``net.layers`` just past the lower half of the CT layers (incl. trailing pools)."""
    ct_index = [i for i, layer in enumerate(net.layers) if isinstance(layer, CTLayer)]
    if len(ct_index) < 2:
        raise DomainError("three-phase training needs at least two CT layers")
    n_lower = len(ct_index) // 2
    return ct_index[n_lower]


class _Trainer:
    def __init__(self, net: Network, dataset, cfg: TrainConfig, teacher=None, eval_data=None, callback=None):
        if len(dataset) == 0:
            raise DomainError("cannot train on an empty dataset")
        self.net = net
        self.data = dataset
        self.cfg = cfg
        self.teacher = teacher
        self.eval_data = eval_data
        self.callback = callback
        self.rng = np.random.default_rng(cfg.seed)
        self.n_ct = len(net.ct_layers)
        self.t = [0.5] * self.n_ct
        self.f = cfg.anneal.f0
        self.opt = [LayerOptimizer(layer, cfg.lr_scale) for layer in net.ct_layers]
        fixed = np.random.default_rng(cfg.seed + 1).permutation(len(dataset))
        self.calib_idx = fixed[:cfg.calib_images]
        self.monitor_idx = fixed[-cfg.monitor_images:]
        self.history: list[dict] = []
        self.global_epoch = 0
        self.pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def cfgs(self):
        return [SoftConfig(t, self.cfg.prune_eps) for t in self.t]

    def recalibrate(self, epoch: float):
        """Set each CT layer's t bottom-up from bit values on the calibration images."""
        if self.cfg.anneal.t0 is not None and epoch < 1:
            self.f = self.cfg.anneal.fraction(epoch)
            self.t = [self.cfg.anneal.t0] * self.n_ct
            return
        xs = [np.asarray(self.data.images[i], dtype=np.float64) for i in self.calib_idx]
        j = 0
        for layer in self.net.layers:
            if isinstance(layer, CTLayer):
                vals = []
                for x in xs:
                    _, cache = forward_soft(x, layer, SoftConfig(self.t[j], self.cfg.prune_eps))
                    vals.append(np.abs(cache.values).ravel())
                self.f, self.t[j] = anneal_step(self.cfg.anneal, epoch, np.concatenate(vals))
                cfg = SoftConfig(self.t[j], self.cfg.prune_eps)
                xs = [forward_soft(x, layer, cfg)[0] for x in xs]
                j += 1
            else:
                xs = [avg_pool(x, layer.l, layer.stride) for x in xs]

    def active_words(self) -> float:
        """Mean materialised words per table and location over the monitor images, all CT layers."""
        counts = []
        for i in self.monitor_idx:
            _, trace = forward_train(self.net, self.data.images[i], self.cfgs())
            counts += [c.active.mean() for c in trace if isinstance(c, ForwardCache)]
        return float(np.mean(counts))

    def _example(self, i, upto, trainable, head, temp):
        x = self.data.images[i]
        label = int(self.data.labels[i])
        feats, trace = forward_train(self.net, x, self.cfgs(), upto)
        logits = grouped_head(feats, self.net.spec.classes) if head else feats.reshape(-1)
        if temp is not None:
            t_logits = self.teacher[self.data.ids[i]]
            loss = distill_loss(logits, t_logits, self.cfg.distill, label, temp)
            g = distill_grad(logits, t_logits, self.cfg.distill, label, temp)
        else:
            loss = cross_entropy(logits, label)
            g = cross_entropy_grad(logits, label)
        g_feats = grouped_head_backward(g, feats.shape, self.net.spec.classes) if head else g.reshape(feats.shape)
        scale = [2.0 * t for t in self.t] if self.cfg.normalize_by_t else None
        grads = backward_train(self.net, trace, g_feats, trainable, upto, scale)
        return loss, int(np.argmax(logits) != label), grads

    def _shard(self, idx, upto, trainable, head, temp):
        total, errors, acc = 0.0, 0, {}
        for i in idx:
            loss, err, grads = self._example(i, upto, trainable, head, temp)
            total += loss
            errors += err
            for j, b in grads.items():
                if j in acc:
                    acc[j] += b
                else:
                    acc[j] = b
        return total, errors, acc

    def batch(self, idx, upto, trainable, head, temp):
        if self.pool is None:
            return self._shard(idx, upto, trainable, head, temp)
        shards = np.array_split(idx, self.cfg.workers)
        parts = list(self.pool.map(lambda s: self._shard(s, upto, trainable, head, temp), shards))
        total, errors, acc = 0.0, 0, {}
        for loss, err, grads in parts:
            total += loss
            errors += err
            for j, b in grads.items():
                if j in acc:
                    acc[j] += b
                else:
                    acc[j] = b
        return total, errors, acc

    def lr_at(self, phase: int, progress: float) -> float:
        ratio = self.cfg.final_lr_ratio
        if phase < 3 or ratio == 1.0:
            return self.cfg.lr
        return self.cfg.lr * (ratio + (1.0 - ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))

    def run_phase(self, phase: int, epochs: int, upto, trainable, head: bool, distill: bool):
        cfg = self.cfg
        n = len(self.data)
        steps = max(n // cfg.batch_size, 1)
        period = cfg.anneal.recalib_period or steps
        for e in range(epochs):
            order = self.rng.permutation(n)
            total, errors, seen = 0.0, 0, 0
            temp = None
            if distill:
                temp = cfg.distill.temperature(e / max(epochs - 1, 1))
            for s in range(steps):
                if s % period == 0:
                    self.recalibrate(self.global_epoch + s / steps)
                idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                loss, err, grads = self.batch(idx, upto, trainable, head, temp)
                total += loss
                errors += err
                seen += len(idx)
                for j, bundle in grads.items():
                    bundle.d_offsets /= len(idx)
                    bundle.d_thresholds /= len(idx)
                    bundle.d_tables /= len(idx)
                    self.opt[j].step(bundle, self.lr_at(phase, (e * steps + s) / (epochs * steps)), cfg.momentum)
            self.global_epoch += 1
            row = {
                "epoch": self.global_epoch, "phase": phase, "loss": total / seen,
                "train_err": errors / seen, "f": self.f, "t": list(self.t),
                "active_words": self.active_words(),
            }
            if self.eval_data is not None and not head:
                hard = self.f <= cfg.anneal.f_floor
                row["val_err"] = evaluate(self.net, self.eval_data, "hard" if hard else self.cfgs())
            self.history.append(row)
            log.info("epoch %d phase %d loss %.4f err %.4f f %.4f active %.3f", row["epoch"], phase,
                     row["loss"], row["train_err"], row["f"], row["active_words"])
            if self.callback is not None:
                self.callback(row)


def train_three_phase(net: Network, dataset, cfg: TrainConfig | None = None, teacher=None, eval_data=None,
                      callback: Callable[[dict], None] | None = None):
    """Lower half with a temporary head, then upper half with the lower frozen, then everything.

    Phase 3 uses the distillation loss when ``cfg.distill`` and ``teacher`` are both given.
    Returns the trained network (modified in place) and the per-epoch history.
    """
    cfg = cfg or TrainConfig()
    if cfg.distill is not None and teacher is None:
        raise DomainError("distillation requested without teacher logits")
    tr = _Trainer(net, dataset, cfg, teacher, eval_data, callback)
    split = split_lower_upper(net)
    n_lower = sum(isinstance(layer, CTLayer) for layer in net.layers[:split])
    lower = [j < n_lower for j in range(tr.n_ct)]
    upper = [not x for x in lower]
    try:
        tr.run_phase(1, cfg.epochs[0], split, lower, head=True, distill=False)
        tr.run_phase(2, cfg.epochs[1], None, upper, head=False, distill=False)
        tr.run_phase(3, cfg.epochs[2], None, [True] * tr.n_ct, head=False,
                     distill=cfg.distill is not None)
    finally:
        if tr.pool is not None:
            tr.pool.shutdown()
    net.soft_t = list(tr.t)
    return net, tr.history
