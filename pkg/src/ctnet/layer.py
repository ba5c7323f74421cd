"""Convolutional Table layers: M (word calculator, voting table) pairs per location.

Parameters live in flat arrays so the whole layer runs inside one compiled
kernel:

* ``offsets``    (M, K, 4) -- dx1, dy1, dx2, dy2 in pixels
* ``thresholds`` (M, K)
* ``channels``   (M, K) int -- fixed at construction
* ``tables``     (M, 2**K, D_o)

The anchor of an output location is the centre of its l x l patch.  Votes are
accumulated in float64 regardless of the parameter dtype, table-major then
word order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .fern import MAX_BITS, BitFunctionParams, SoftConfig, SoftWordActivity, WordCalculator
from .tensor import DomainError, PadSpec, _sample, _sample_grad, _scatter, output_extent, pad_same


@dataclass
class ConvTable:
    calculator: WordCalculator
    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table)
        if self.table.ndim != 2 or self.table.shape[0] != 2**self.calculator.K:
            raise DomainError(
                f"voting table needs 2**K = {2**self.calculator.K} rows, got shape {self.table.shape}"
            )


@dataclass
class CTLayer:
    offsets: np.ndarray
    thresholds: np.ndarray
    channels: np.ndarray
    tables: np.ndarray
    patch_size: int
    d_in: int
    stride: int = 1
    pad: PadSpec = field(default_factory=PadSpec)

    def __post_init__(self):
        M, K = self.thresholds.shape
        if M < 1 or not 1 <= K <= MAX_BITS:
            raise DomainError(f"need M >= 1 and 1 <= K <= {MAX_BITS}, got M={M}, K={K}")
        if self.offsets.shape != (M, K, 4) or self.channels.shape != (M, K):
            raise DomainError("offset/channel arrays do not match thresholds")
        if self.tables.ndim != 3 or self.tables.shape[:2] != (M, 2**K):
            raise DomainError(f"tables must have shape (M, 2**K, D_o), got {self.tables.shape}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise DomainError(f"patch size must be odd, got {self.patch_size}")
        if self.channels.min() < 0 or self.channels.max() >= self.d_in:
            raise DomainError(f"channel indices must lie in [0, {self.d_in})")
        if self.stride < 1:
            raise DomainError("stride must be positive")
        self.channels = np.ascontiguousarray(self.channels, dtype=np.int64)

    @property
    def M(self) -> int:
        return self.thresholds.shape[0]

    @property
    def K(self) -> int:
        return self.thresholds.shape[1]

    @property
    def d_out(self) -> int:
        return self.tables.shape[2]

    @property
    def radius(self) -> int:
        return (self.patch_size - 1) // 2

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (
            output_extent(h, self.patch_size, self.stride, self.pad.mode),
            output_extent(w, self.patch_size, self.stride, self.pad.mode),
            self.d_out,
        )

    def clamp_offsets(self) -> None:
        np.clip(self.offsets, -self.radius, self.radius, out=self.offsets)

    def param_count(self) -> int:
        return self.offsets.size + self.thresholds.size + self.tables.size

    def conv_tables(self) -> list[ConvTable]:
        out = []
        for m in range(self.M):
            bits = [
                BitFunctionParams(*map(float, self.offsets[m, k]), int(self.channels[m, k]),
                                  float(self.thresholds[m, k]))
                for k in range(self.K)
            ]
            out.append(ConvTable(WordCalculator(bits, self.patch_size), self.tables[m].copy()))
        return out

    @classmethod
    def from_tables(cls, tables: list[ConvTable], d_in: int, stride: int = 1, pad: PadSpec | None = None,
                    dtype=np.float64) -> "CTLayer":
        if not tables:
            raise DomainError("a CT layer needs at least one table")
        K = tables[0].calculator.K
        l = tables[0].calculator.patch_size
        d_out = tables[0].table.shape[1]
        for ct in tables:
            if (ct.calculator.K, ct.calculator.patch_size, ct.table.shape[1]) != (K, l, d_out):
                raise DomainError("all tables of a layer must share K, l and D_o")
        offsets = np.array([[[b.dx1, b.dy1, b.dx2, b.dy2] for b in ct.calculator.bits] for ct in tables],
                           dtype=dtype)
        thresholds = np.array([[b.threshold for b in ct.calculator.bits] for ct in tables], dtype=dtype)
        channels = np.array([[b.channel for b in ct.calculator.bits] for ct in tables], dtype=np.int64)
        stack = np.stack([np.asarray(ct.table, dtype=dtype) for ct in tables])
        return cls(offsets, thresholds, channels, stack, l, d_in, stride, pad or PadSpec())

    @classmethod
    def random(cls, rng: np.random.Generator, d_in: int, l: int, K: int, M: int, d_out: int,
               stride: int = 1, pad: PadSpec | None = None, sigma: float = 1.0,
               table_sigma: float = 1.0, threshold_sigma: float = 1.0, dtype=np.float32) -> "CTLayer":
        """Gaussian initialisation; channels dealt round-robin over a seeded shuffle."""
        r = (l - 1) // 2
        offsets = np.clip(rng.normal(0.0, sigma, (M, K, 4)), -r, r)
        thresholds = rng.normal(0.0, threshold_sigma, (M, K))
        tables = rng.normal(0.0, table_sigma, (M, 2**K, d_out))
        order = rng.permutation(d_in)
        channels = order[np.arange(M * K) % d_in].reshape(M, K)
        return cls(offsets.astype(dtype), thresholds.astype(dtype), channels, tables.astype(dtype),
                   l, d_in, stride, pad or PadSpec())

    def copy(self) -> "CTLayer":
        return CTLayer(self.offsets.copy(), self.thresholds.copy(), self.channels.copy(), self.tables.copy(),
                       self.patch_size, self.d_in, self.stride, self.pad)


@dataclass
class ForwardCache:
    layer: CTLayer
    x_pad: np.ndarray
    in_shape: tuple
    values: np.ndarray      # (H_o, W_o, M, K) pre-threshold bit values
    active: np.ndarray      # (H_o, W_o, M) materialised word count
    cfg: SoftConfig
    params: tuple           # float64 parameter arrays the forward pass used


# -- kernels ------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _bit(xp, cx, cy, off, th, ch, m, k):
    c = ch[m, k]
    s1 = _sample(xp, cx + off[m, k, 0], cy + off[m, k, 1], c)
    s2 = _sample(xp, cx + off[m, k, 2], cy + off[m, k, 3], c)
    return s1 - s2 - th[m, k]


@njit(cache=True, nogil=True)
def _forward_hard(xp, off, th, ch, tables, r, stride, out):
    ho, wo, d = out.shape
    M, K = th.shape
    for oy in range(ho):
        cy = float(oy * stride + r)
        for ox in range(wo):
            cx = float(ox * stride + r)
            for m in range(M):
                word = 0
                for k in range(K):
                    word <<= 1
                    if _bit(xp, cx, cy, off, th, ch, m, k) >= 0.0:
                        word |= 1
                for j in range(d):
                    out[oy, ox, j] += tables[m, word, j]


@njit(cache=True, nogil=True)
def _words(vals, t, eps, amb, words, weights):
    """Expand ambiguous bits of one calculator; returns the number of kept words."""
    K = vals.shape[0]
    a = 0
    base = 0
    for k in range(K):
        v = vals[k]
        if abs(v) < t:
            amb[a] = k
            a += 1
        elif v >= t:
            base |= 1 << (K - 1 - k)
    n = 0
    inv2t = 0.5 / t
    for combo in range(1 << a):
        word = base
        w = 1.0
        for j in range(a):
            k = amb[j]
            if (combo >> (a - 1 - j)) & 1:
                word |= 1 << (K - 1 - k)
                w *= min(max((t + vals[k]) * inv2t, 0.0), 1.0)
            else:
                w *= min(max((t - vals[k]) * inv2t, 0.0), 1.0)
        if w > 0.0 and w >= eps:
            words[n] = word
            weights[n] = w
            n += 1
    return n


@njit(cache=True, nogil=True)
def _forward_soft(xp, off, th, ch, tables, r, stride, t, eps, out, values, active):
    ho, wo, d = out.shape
    M, K = th.shape
    amb = np.empty(K, np.int64)
    words = np.empty(1 << K, np.int64)
    weights = np.empty(1 << K)
    for oy in range(ho):
        cy = float(oy * stride + r)
        for ox in range(wo):
            cx = float(ox * stride + r)
            for m in range(M):
                for k in range(K):
                    values[oy, ox, m, k] = _bit(xp, cx, cy, off, th, ch, m, k)
                n = _words(values[oy, ox, m], t, eps, amb, words, weights)
                active[oy, ox, m] = n
                for i in range(n):
                    w = weights[i]
                    b = words[i]
                    for j in range(d):
                        out[oy, ox, j] += w * tables[m, b, j]


@njit(cache=True, nogil=True)
def _backward(xp, off, th, ch, tables, r, stride, t, eps, values, d_out, want_input,
              d_xp, d_off, d_th, d_tab):
    ho, wo, d = d_out.shape
    M, K = th.shape
    amb = np.empty(K, np.int64)
    words = np.empty(1 << K, np.int64)
    weights = np.empty(1 << K)
    dv = np.empty(K)
    inv2t = 0.5 / t
    for oy in range(ho):
        cy = float(oy * stride + r)
        for ox in range(wo):
            cx = float(ox * stride + r)
            g_out = d_out[oy, ox]
            for m in range(M):
                vals = values[oy, ox, m]
                n = _words(vals, t, eps, amb, words, weights)
                a = 0
                for k in range(K):
                    dv[k] = 0.0
                    if abs(vals[k]) < t:
                        a += 1
                for i in range(n):
                    b = words[i]
                    w = weights[i]
                    g = 0.0
                    for j in range(d):
                        g += tables[m, b, j] * g_out[j]
                        d_tab[m, b, j] += w * g_out[j]
                    if a == 0 or g == 0.0:
                        continue
                    # d w_b / d v_k = s(b,k) / 2t * prod_{j != k} q_j
                    for jj in range(a):
                        k = amb[jj]
                        prod = 1.0
                        for ii in range(a):
                            if ii == jj:
                                continue
                            kk = amb[ii]
                            if (b >> (K - 1 - kk)) & 1:
                                prod *= min(max((t + vals[kk]) * inv2t, 0.0), 1.0)
                            else:
                                prod *= min(max((t - vals[kk]) * inv2t, 0.0), 1.0)
                        if (b >> (K - 1 - k)) & 1:
                            dv[k] += g * prod * inv2t
                        else:
                            dv[k] -= g * prod * inv2t
                for jj in range(a):
                    k = amb[jj]
                    gk = dv[k]
                    if gk == 0.0:
                        continue
                    c = ch[m, k]
                    x1 = cx + off[m, k, 0]
                    y1 = cy + off[m, k, 1]
                    x2 = cx + off[m, k, 2]
                    y2 = cy + off[m, k, 3]
                    d_th[m, k] -= gk
                    gx, gy = _sample_grad(xp, x1, y1, c)
                    d_off[m, k, 0] += gk * gx
                    d_off[m, k, 1] += gk * gy
                    gx, gy = _sample_grad(xp, x2, y2, c)
                    d_off[m, k, 2] -= gk * gx
                    d_off[m, k, 3] -= gk * gy
                    if want_input:
                        _scatter(d_xp, x1, y1, c, gk)
                        _scatter(d_xp, x2, y2, c, -gk)


# -- public operations ------------------------------------------------------------

def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _prepare(t_in: np.ndarray, layer: CTLayer):
    t_in = np.asarray(t_in, dtype=np.float64)
    if t_in.ndim != 3 or t_in.shape[2] != layer.d_in:
        raise DomainError(f"layer expects depth {layer.d_in}, got input shape {t_in.shape}")
    ho, wo, d = layer.output_shape(t_in.shape[0], t_in.shape[1])
    if layer.pad.mode == "same":
        xp = pad_same(t_in, layer.radius, layer.pad.fill)
    else:
        xp = t_in
    params = (_f64(layer.offsets), _f64(layer.thresholds), layer.channels, _f64(layer.tables))
    return np.ascontiguousarray(xp), (ho, wo, d), params


def forward_hard(t_in: np.ndarray, layer: CTLayer) -> np.ndarray:
    """Sum over tables of the voting row selected by each hard word."""
    xp, shape, (off, th, ch, tab) = _prepare(t_in, layer)
    out = np.zeros(shape)
    _forward_hard(xp, off, th, ch, tab, layer.radius, layer.stride, out)
    return out


@njit(cache=True, nogil=True)
def _bit_maps(xp, dp, off, th, ch, r, stride, vals, spread):
    ho, wo, M, K = vals.shape
    for oy in range(ho):
        cy = float(oy * stride + r)
        for ox in range(wo):
            cx = float(ox * stride + r)
            for m in range(M):
                for k in range(K):
                    c = ch[m, k]
                    x1, y1 = cx + off[m, k, 0], cy + off[m, k, 1]
                    x2, y2 = cx + off[m, k, 2], cy + off[m, k, 3]
                    vals[oy, ox, m, k] = _sample(xp, x1, y1, c) - _sample(xp, x2, y2, c) - th[m, k]
                    spread[oy, ox, m, k] = _sample(dp, x1, y1, c) + _sample(dp, x2, y2, c)


def bit_value_maps(t_in: np.ndarray, layer: CTLayer, delta: np.ndarray | None = None):
    """Pre-threshold bit values per location, shape (H_o, W_o, M, K).

    With ``delta`` (a nonnegative per-entry bound on input perturbations, same
    shape as ``t_in``) also returns the matching bound on each bit value's
    perturbation: bilinear weights are a convex combination, so each sample moves
    by at most the interpolated bound.
    """
    xp, shape, (off, th, ch, _) = _prepare(t_in, layer)
    if delta is None:
        dp = np.zeros_like(xp)
    else:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != np.shape(t_in):
            raise DomainError(f"delta shape {delta.shape} != input shape {np.shape(t_in)}")
        dp = pad_same(delta, layer.radius, 0.0) if layer.pad.mode == "same" else delta
    vals = np.empty(shape[:2] + (layer.M, layer.K))
    spread = np.empty_like(vals)
    _bit_maps(xp, np.ascontiguousarray(dp), off, th, ch, layer.radius, layer.stride, vals, spread)
    return (vals, spread) if delta is not None else vals


def forward_soft(t_in: np.ndarray, layer: CTLayer, cfg: SoftConfig) -> tuple[np.ndarray, ForwardCache]:
    """Soft CT output: activity-weighted votes over all reachable words."""
    xp, shape, params = _prepare(t_in, layer)
    off, th, ch, tab = params
    out = np.zeros(shape)
    values = np.empty(shape[:2] + (layer.M, layer.K))
    active = np.empty(shape[:2] + (layer.M,), np.int64)
    _forward_soft(xp, off, th, ch, tab, layer.radius, layer.stride, float(cfg.t), float(cfg.prune_eps),
                  out, values, active)
    cache = ForwardCache(layer, xp, tuple(np.shape(t_in)), values, active, cfg, params)
    return out, cache


def layer_backward(cache: ForwardCache, d_out: np.ndarray, want_input: bool = True):
    """Raw gradients (d_input, d_offsets, d_thresholds, d_tables) of a soft forward pass."""
    layer = cache.layer
    d_out = _f64(d_out)
    if d_out.shape != cache.values.shape[:2] + (layer.d_out,):
        raise DomainError(f"upstream gradient shape {d_out.shape} does not match the cached forward pass")
    off, th, ch, tab = cache.params
    if off.shape != layer.offsets.shape or tab.shape != layer.tables.shape:
        raise DomainError("layer parameters changed shape since the forward pass")
    d_xp = np.zeros(cache.x_pad.shape) if want_input else np.zeros((1, 1, 1))
    d_off = np.zeros(off.shape)
    d_th = np.zeros(th.shape)
    d_tab = np.zeros(tab.shape)
    _backward(cache.x_pad, off, th, ch, tab, layer.radius, layer.stride, float(cache.cfg.t),
              float(cache.cfg.prune_eps), cache.values, d_out, want_input, d_xp, d_off, d_th, d_tab)
    d_in = None
    if want_input:
        if layer.pad.mode == "same" and layer.radius > 0:
            r = layer.radius
            d_in = d_xp[r:-r, r:-r]
        else:
            d_in = d_xp
    return d_in, d_off, d_th, d_tab


def sparse_vote(activity: SoftWordActivity, table: np.ndarray) -> np.ndarray:
    """Weighted sum of the table rows named by a sparse word activity."""
    if not activity.entries:
        raise DomainError("empty word activity: every word was pruned")
    table = np.asarray(table)
    out = np.zeros(table.shape[1])
    for b in sorted(activity.entries):
        if not 0 <= b < table.shape[0]:
            raise DomainError(f"word {b} outside table with {table.shape[0]} rows")
        out += activity.entries[b] * table[b].astype(np.float64)
    return out


def layer_op_count(layer: CTLayer, c_b: float = 10) -> float:
    """Operations per output location: M * (c_b * K + D_o)."""
    return layer.M * (c_b * layer.K + layer.d_out)
