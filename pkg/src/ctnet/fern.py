"""Bit-functions and word calculators, hard and soft.

A bit-function compares two fractionally offset samples of one input channel
against a threshold.  K of them form a word calculator whose K-bit output
(bit 1 = most significant) indexes a voting table.  The soft calculator
replaces the Heaviside step by a clamped linear ramp and spreads unit mass
over the words reachable through ambiguous bits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DomainError, bilinear_sample

MAX_BITS = 16


@dataclass
class BitFunctionParams:
    dx1: float
    dy1: float
    dx2: float
    dy2: float
    channel: int
    threshold: float

    def clamp(self, radius: float) -> None:
        self.dx1, self.dy1, self.dx2, self.dy2 = (
            float(np.clip(v, -radius, radius)) for v in (self.dx1, self.dy1, self.dx2, self.dy2)
        )


@dataclass
class WordCalculator:
    bits: list[BitFunctionParams]
    patch_size: int

    def __post_init__(self):
        if not 1 <= len(self.bits) <= MAX_BITS:
            raise DomainError(f"K must lie in [1, {MAX_BITS}], got {len(self.bits)}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise DomainError(f"patch size must be odd and positive, got {self.patch_size}")

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def radius(self) -> float:
        return (self.patch_size - 1) / 2


@dataclass(frozen=True)
class SoftConfig:
    t: float = 0.5
    prune_eps: float = 1e-8

    def __post_init__(self):
        if not self.t > 0:
            raise DomainError(f"sigmoid half-width t must be positive, got {self.t}")
        if self.prune_eps < 0:
            raise DomainError("prune_eps must be nonnegative")

    def exact_for(self, K: int) -> bool:
        """True when pruning can never drop a word of nonzero mass for a K-bit calculator."""
        return self.prune_eps < 2.0 ** -K


@dataclass
class SoftWordActivity:
    entries: dict[int, float] = field(default_factory=dict)

    def total(self) -> float:
        return math.fsum(self.entries.values())

    def __len__(self):
        return len(self.entries)


def bit_value(t_in: np.ndarray, px: int, py: int, params: BitFunctionParams) -> float:
    """Pre-threshold bit value at anchor (px, py): sample1 - sample2 - threshold."""
    s1 = bilinear_sample(t_in, px + params.dx1, py + params.dy1, params.channel)
    s2 = bilinear_sample(t_in, px + params.dx2, py + params.dy2, params.channel)
    return s1 - s2 - params.threshold


def bit_hard(value: float) -> int:
    # Heaviside with Q(0) = 1
    return 1 if value >= 0 else 0


def soft_sigmoid(x, t: float):
    """Clamped linear ramp min(max((t + x) / 2t, 0), 1)."""
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    return np.clip((t + np.asarray(x, dtype=np.float64)) / (2.0 * t), 0.0, 1.0)[()]


def bit_sign(b: int, k: int, K: int) -> int:
    """+1 if bit k (1-based, MSB first) of the K-bit word b is set, else -1."""
    if not (0 <= b < 2**K and 1 <= k <= K):
        raise DomainError(f"bit {k} of word {b} undefined for K={K}")
    return 1 if (b >> (K - k)) & 1 else -1


def bits_to_word(bits) -> int:
    word = 0
    for bit in bits:
        word = (word << 1) | int(bit)
    return word


def bit_values(t_in: np.ndarray, px: int, py: int, calc: WordCalculator) -> np.ndarray:
    return np.array([bit_value(t_in, px, py, p) for p in calc.bits])


def word_hard(t_in: np.ndarray, px: int, py: int, calc: WordCalculator) -> int:
    return bits_to_word(bit_hard(v) for v in bit_values(t_in, px, py, calc))


def soft_activity_from_values(values, cfg: SoftConfig) -> SoftWordActivity:
    """Sparse word distribution implied by K pre-threshold bit values.

    Only bits with |value| < t are expanded; every other bit contributes a
    factor of exactly one on the hard side, so 2**a words are produced for a
    ambiguous bits before pruning.
    """
    values = np.asarray(values, dtype=np.float64)
    K = len(values)
    ambiguous = [k for k in range(K) if abs(values[k]) < cfg.t]
    base = 0
    for k in range(K):
        if values[k] >= cfg.t:
            base |= 1 << (K - 1 - k)
    q_one = soft_sigmoid(values, cfg.t)
    q_zero = soft_sigmoid(-values, cfg.t)
    entries = {}
    a = len(ambiguous)
    for combo in range(2**a):
        word = base
        weight = 1.0
        for j, k in enumerate(ambiguous):
            if (combo >> (a - 1 - j)) & 1:
                word |= 1 << (K - 1 - k)
                weight *= q_one[k]
            else:
                weight *= q_zero[k]
        if weight > 0.0 and weight >= cfg.prune_eps:
            entries[word] = weight
    return SoftWordActivity(entries)


def word_soft(t_in: np.ndarray, px: int, py: int, calc: WordCalculator, cfg: SoftConfig) -> SoftWordActivity:
    return soft_activity_from_values(bit_values(t_in, px, py, calc), cfg)


def calibrate_t(observed_abs_values, f: float) -> float:
    """Smallest observed |value| such that a fraction f of the sample lies at or below it."""
    if not 0 < f < 1:
        raise DomainError(f"ambiguous fraction must lie in (0, 1), got {f}")
    v = np.abs(np.asarray(observed_abs_values, dtype=np.float64)).ravel()
    if v.size == 0:
        raise DomainError("cannot calibrate t from an empty sample")
    k = max(int(math.ceil(f * v.size)) - 1, 0)
    return float(np.partition(v, k)[k])
