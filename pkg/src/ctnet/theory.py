"""Small exact constructions with ferns of axis-aligned threshold bits.

Two facts are made executable here:

* a fern of K single-coordinate threshold bits realizes every +-1 labelling of
  the 2^K cube vertices (a K-bit fern family has VC dimension at least 2^K);
* a two-layer network of one-bit ferns reproduces any finite sum of
  weighted axis-aligned box indicators exactly.

Everything works on plain float arrays of points, shape (n, d).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .tensor import DomainError

MAX_SHATTER_BITS = 6


@dataclass(frozen=True)
class SimpleBitFunction:
    """Q((-1)^s (x[dim] - thresh)) with Q(0) = 1."""
    s: int
    dim: int
    thresh: float

    def __post_init__(self):
        if self.s not in (0, 1):
            raise DomainError(f"direction must be 0 or 1, got {self.s}")
        if self.dim < 0:
            raise DomainError(f"dimension index must be nonnegative, got {self.dim}")
        if not np.isfinite(self.thresh):
            raise DomainError("threshold must be finite")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        v = x[:, self.dim] - self.thresh
        if self.s:
            v = -v
        return (v >= 0).astype(np.int64)


@dataclass
class SimpleFern:
    bits: list
    table: np.ndarray          # (2^K, D_out)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim == 1:
            self.table = self.table[:, None]
        if self.table.shape[0] != 2 ** len(self.bits):
            raise DomainError(f"table needs {2 ** len(self.bits)} rows, got {self.table.shape[0]}")

    @property
    def K(self) -> int:
        return len(self.bits)

    def words(self, x: np.ndarray) -> np.ndarray:
        """Word index per point, first bit most significant."""
        w = np.zeros(np.atleast_2d(x).shape[0], dtype=np.int64)
        for b in self.bits:
            w = 2 * w + b(x)
        return w

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.table[self.words(x)]


def _check_dims(bits, d: int):
    for b in bits:
        if b.dim >= d:
            raise DomainError(f"bit reads dimension {b.dim} of a {d}-dimensional input")


# -- shattering ----------------------------------------------------------------

def build_shatter_instance(K: int) -> tuple[SimpleFern, np.ndarray]:
    """Fern thresholding each of K coordinates at 0.5, and the cube vertices at 0.25/0.75.

    Point n of the sample has coordinate k at 0.75 when bit k of n (most
    significant first) is set, so its word index is n.
    """
    if not 1 <= K <= MAX_SHATTER_BITS:
        raise DomainError(f"K must lie in [1, {MAX_SHATTER_BITS}], got {K}")
    bits = [SimpleBitFunction(0, k, 0.5) for k in range(K)]
    n = np.arange(2**K)
    codes = (n[:, None] >> np.arange(K - 1, -1, -1)) & 1
    sample = 0.25 + 0.5 * codes
    return SimpleFern(bits, np.zeros(2**K)), sample


def all_labelings(n: int) -> np.ndarray:
    """Every +-1 labelling of n points, shape (2^n, n)."""
    if n > 20:
        raise DomainError("refusing to enumerate more than 2^20 labelings")
    codes = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    return (2 * codes - 1).astype(np.int8)


def random_labelings(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return (2 * rng.integers(0, 2, size=(count, n)) - 1).astype(np.int8)


def _chunks(labelings, size: int) -> Iterator[np.ndarray]:
    if isinstance(labelings, np.ndarray):
        labelings = np.atleast_2d(labelings)
        for i in range(0, len(labelings), size):
            yield labelings[i:i + size]
        return
    it = iter(labelings)
    while True:
        block = list(itertools.islice(it, size))
        if not block:
            return
        yield np.asarray(block)


def verify_shatter(fern: SimpleFern, sample: np.ndarray, labelings: Iterable, chunk: int = 8192) -> bool:
    """True iff each labelling is realized by some +-1 table.

    The table is built directly: W[word(x)] = label(x).  If two points share a
    word and disagree, the later write wins and the read-back check fails.
    """
    sample = np.atleast_2d(np.asarray(sample, dtype=np.float64))
    _check_dims(fern.bits, sample.shape[1])
    words = fern.words(sample)
    for block in _chunks(labelings, chunk):
        if block.shape[1] != len(sample):
            raise DomainError(f"labelling length {block.shape[1]} != sample size {len(sample)}")
        W = np.zeros((len(block), 2**fern.K), dtype=np.int8)
        W[:, words] = block
        if not np.array_equal(W[:, words], block):
            return False
    return True


# -- rectangle functions -------------------------------------------------------

@dataclass(frozen=True)
class RectangleSpec:
    lo: tuple
    hi: tuple
    value: float

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DomainError("lo and hi must be vectors of equal length")
        if np.any(lo > hi):
            raise DomainError(f"lo {tuple(lo)} exceeds hi {tuple(hi)}")
        if np.any(lo < 0) or np.any(hi > 1):
            raise DomainError("rectangle must lie inside the unit cube")
        object.__setattr__(self, "lo", tuple(lo.tolist()))
        object.__setattr__(self, "hi", tuple(hi.tolist()))

    @property
    def d(self) -> int:
        return len(self.lo)

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Closed-box membership."""
        x = np.atleast_2d(x)
        return np.all((x >= np.asarray(self.lo)) & (x <= np.asarray(self.hi)), axis=1)


@dataclass
class RectangleNetwork:
    d: int
    layer1: list = field(default_factory=list)   # one-bit ferns on x, tables (2, P)
    layer2: list = field(default_factory=list)   # one-bit ferns on Y, tables (2, 1)

    def hidden(self, x: np.ndarray) -> np.ndarray:
        """Layer-1 output Y: Y[p] counts the box-p edge tests that x passes."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise DomainError(f"expected {self.d}-dimensional points, got {x.shape[1]}")
        y = np.zeros((len(x), len(self.layer2)))
        for f in self.layer1:
            y += f(x)
        return y

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = self.hidden(x)
        u = np.zeros(len(y))
        for f in self.layer2:
            u += f(y)[:, 0]
        return u


def build_rectangle_network(rects: list, d: int) -> RectangleNetwork:
    """Two layers of K=1 ferns computing U(x) = sum_p v_p [x in R_p].

    Layer 1 has 2d ferns per box: L_i = Q(x_i - a_i) and R_i = Q(b_i - x_i), each
    voting 1 into coordinate p when its bit is set.  Layer 2 thresholds Y[p] at
    2d - 1/2 and votes v_p.
    """
    if not rects:
        raise DomainError("need at least one rectangle")
    P = len(rects)
    net = RectangleNetwork(d)
    for p, r in enumerate(rects):
        if not isinstance(r, RectangleSpec):
            raise DomainError(f"rectangle {p} is not a RectangleSpec")
        if r.d != d:
            raise DomainError(f"rectangle {p} has dimension {r.d}, expected {d}")
        vote = np.zeros((2, P))
        vote[1, p] = 1.0
        for i in range(d):
            net.layer1.append(SimpleFern([SimpleBitFunction(0, i, r.lo[i])], vote))
            net.layer1.append(SimpleFern([SimpleBitFunction(1, i, r.hi[i])], vote))
        net.layer2.append(SimpleFern([SimpleBitFunction(0, p, 2 * d - 0.5)], [0.0, r.value]))
    return net


def step_function(rects: list, x: np.ndarray) -> np.ndarray:
    """Direct evaluation of sum_p v_p [x in R_p]."""
    x = np.atleast_2d(x)
    u = np.zeros(len(x))
    for r in rects:
        u += np.where(r.contains(x), r.value, 0.0)
    return u


def random_rectangles(rng: np.random.Generator, P: int, d: int) -> list:
    out = []
    for _ in range(P):
        ends = np.sort(rng.random((d, 2)), axis=1)
        value = float(rng.choice([-3, -2, -1, 1, 2, 3]))
        out.append(RectangleSpec(tuple(ends[:, 0]), tuple(ends[:, 1]), value))
    return out


def off_boundary_points(rng: np.random.Generator, rects: list, d: int, n: int) -> np.ndarray:
    """n uniform points, none lying exactly on a box face plane."""
    faces = [(i, c) for r in rects for i in range(d) for c in (r.lo[i], r.hi[i])]
    pts = []
    while sum(len(p) for p in pts) < n:
        x = rng.random((n, d))
        keep = np.ones(n, dtype=bool)
        for i, c in faces:
            keep &= x[:, i] != c
        pts.append(x[keep])
    return np.concatenate(pts)[:n]


# -- reports ---------------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def check_shattering(K: int, random_count: int = 1000, seed: int = 0, exhaustive_max: int = 4) -> CheckResult:
    fern, sample = build_shatter_instance(K)
    n = len(sample)
    if K <= exhaustive_max:
        labels, how = all_labelings(n), "all"
    else:
        labels, how = random_labelings(n, random_count, np.random.default_rng(seed)), "random"
    ok = verify_shatter(fern, sample, labels)
    return CheckResult(f"shatter K={K}", ok, f"{len(labels)} {how} labelings of {n} points")


def check_rectangles(instances: int = 20, points: int = 10_000, seed: int = 0, max_P: int = 3,
                     dims=(1, 2, 3)) -> CheckResult:
    rng = np.random.default_rng(seed)
    for k in range(instances):
        d = int(rng.choice(dims))
        rects = random_rectangles(rng, int(rng.integers(1, max_P + 1)), d)
        net = build_rectangle_network(rects, d)
        x = off_boundary_points(rng, rects, d, points)
        if not np.array_equal(net(x), step_function(rects, x)):
            return CheckResult("rectangle network", False, f"instance {k} (d={d}, P={len(rects)}) differs")
    return CheckResult("rectangle network", True, f"{instances} instances x {points} points exact")
