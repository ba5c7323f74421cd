"""Dense H x W x D activation maps and the sampling primitives CT layers need.

A tensor is a C-contiguous float64 ``ndarray`` of shape ``(H, W, D)``; its flat
buffer is row-major in ``(y, x, c)`` order with the channel varying fastest.
Fractional coordinates are clamped to the border before interpolation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit


class DomainError(ValueError):
    """Raised when an argument lies outside an operation's domain."""


@dataclass(frozen=True)
class PadSpec:
    mode: str = "valid"
    fill: float = 0.0

    def __post_init__(self):
        if self.mode not in ("valid", "same"):
            raise DomainError(f"unknown pad mode {self.mode!r}")


def tensor3(data, dtype=np.float64) -> np.ndarray:
    """Validate and coerce ``data`` into an (H, W, D) tensor."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DomainError(f"expected a non-empty H x W x D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains non-finite values")
    return arr


def output_extent(extent: int, l: int, stride: int = 1, pad: str = "valid") -> int:
    """Spatial output size of a sliding l x l window."""
    if stride < 1 or l < 1:
        raise DomainError("window and stride must be positive")
    if pad == "same":
        return (extent - 1) // stride + 1
    if l > extent:
        raise DomainError(f"window {l} larger than extent {extent}")
    return (extent - l) // stride + 1


def pad_same(t: np.ndarray, radius: int, fill: float = 0.0) -> np.ndarray:
    if radius == 0:
        return t
    return np.pad(t, ((radius, radius), (radius, radius), (0, 0)), constant_values=fill)


# -- bilinear interpolation ---------------------------------------------------

@njit(cache=True, nogil=True)
def _cell(coord, n):
    """Clamp ``coord`` into [0, n-1]; return (i0, i1, frac, inside)."""
    inside = True
    if coord <= 0.0:
        if coord < 0.0:
            inside = False
        coord = 0.0
    elif coord >= n - 1:
        if coord > n - 1:
            inside = False
        coord = float(n - 1)
    i0 = int(math.floor(coord))
    i1 = i0 + 1
    if i1 > n - 1:
        i1 = n - 1
    return i0, i1, coord - i0, inside


@njit(cache=True, nogil=True)
def _sample(t, x, y, c):
    x0, x1, fx, _ = _cell(x, t.shape[1])
    y0, y1, fy, _ = _cell(y, t.shape[0])
    top = (1.0 - fx) * t[y0, x0, c] + fx * t[y0, x1, c]
    bot = (1.0 - fx) * t[y1, x0, c] + fx * t[y1, x1, c]
    return (1.0 - fy) * top + fy * bot


@njit(cache=True, nogil=True)
def _sample_grad(t, x, y, c):
    """Exact partial derivatives of the clamped bilinear interpolant in x and y.

    Zero along an axis where the coordinate was clamped from outside.
    """
    x0, x1, fx, inx = _cell(x, t.shape[1])
    y0, y1, fy, iny = _cell(y, t.shape[0])
    a = t[y0, x0, c]
    b = t[y0, x1, c]
    cc = t[y1, x0, c]
    d = t[y1, x1, c]
    gx = 0.0
    gy = 0.0
    if inx:
        gx = (1.0 - fy) * (b - a) + fy * (d - cc)
    if iny:
        gy = (1.0 - fx) * (cc - a) + fx * (d - b)
    return gx, gy


@njit(cache=True, nogil=True)
def _scatter(acc, x, y, c, g):
    x0, x1, fx, _ = _cell(x, acc.shape[1])
    y0, y1, fy, _ = _cell(y, acc.shape[0])
    acc[y0, x0, c] += (1.0 - fy) * (1.0 - fx) * g
    acc[y0, x1, c] += (1.0 - fy) * fx * g
    acc[y1, x0, c] += fy * (1.0 - fx) * g
    acc[y1, x1, c] += fy * fx * g


def _check_channel(t, c):
    if not 0 <= int(c) < t.shape[2]:
        raise DomainError(f"channel {c} outside [0, {t.shape[2]})")


def bilinear_sample(t: np.ndarray, x: float, y: float, c: int) -> float:
    """Interpolate channel ``c`` of ``t`` at column ``x``, row ``y``."""
    _check_channel(t, c)
    return float(_sample(t, float(x), float(y), int(c)))


def bilinear_scatter_add(acc: np.ndarray, x: float, y: float, c: int, g: float) -> None:
    """Adjoint of :func:`bilinear_sample`: add ``g`` to the 4 neighbours in place."""
    _check_channel(acc, c)
    _scatter(acc, float(x), float(y), int(c), float(g))


def spatial_gradients(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences inside, one-sided differences on the border."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape[0] < 2 or t.shape[1] < 2:
        raise DomainError("spatial gradients need H >= 2 and W >= 2")
    return np.gradient(t, axis=1, edge_order=1), np.gradient(t, axis=0, edge_order=1)


# -- average pooling ------------------------------------------------------------

@njit(cache=True, nogil=True)
def _avg_pool(t, l, stride, out):
    ho, wo, d = out.shape
    inv = 1.0 / (l * l)
    for oy in range(ho):
        for ox in range(wo):
            for dy in range(l):
                for dx in range(l):
                    y = oy * stride + dy
                    x = ox * stride + dx
                    for c in range(d):
                        out[oy, ox, c] += t[y, x, c]
            for c in range(d):
                out[oy, ox, c] *= inv


@njit(cache=True, nogil=True)
def _avg_pool_backward(d_out, l, stride, d_in):
    ho, wo, d = d_out.shape
    inv = 1.0 / (l * l)
    for oy in range(ho):
        for ox in range(wo):
            for dy in range(l):
                for dx in range(l):
                    y = oy * stride + dy
                    x = ox * stride + dx
                    for c in range(d):
                        d_in[y, x, c] += d_out[oy, ox, c] * inv


def avg_pool(t: np.ndarray, l: int, stride: int = 1) -> np.ndarray:
    """Valid-region mean pooling with an l x l window."""
    t = np.asarray(t, dtype=np.float64)
    if l > min(t.shape[0], t.shape[1]):
        raise DomainError(f"pool window {l} larger than input {t.shape[:2]}")
    ho = output_extent(t.shape[0], l, stride)
    wo = output_extent(t.shape[1], l, stride)
    out = np.zeros((ho, wo, t.shape[2]))
    _avg_pool(np.ascontiguousarray(t), l, stride, out)
    return out


def avg_pool_backward(d_out: np.ndarray, in_shape, l: int, stride: int = 1) -> np.ndarray:
    d_in = np.zeros(in_shape)
    _avg_pool_backward(np.ascontiguousarray(d_out, dtype=np.float64), l, stride, d_in)
    return d_in
