"""Dataset loaders, model containers and teacher-logit files.

Every on-disk format here has an explicit byte order, so results do not depend
on the host's endianness.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layer import CTLayer, bit_value_maps, forward_hard
from .network import AvgPool, LayerSpec, Network, NetworkSpec
from .tensor import DomainError, PadSpec, avg_pool


class ParseError(DomainError):
    """Malformed input file; the message carries a byte offset, record index or id."""


@dataclass
class Dataset:
    images: np.ndarray          # (N, H, W, D) in [0, 1]
    labels: np.ndarray          # (N,)
    class_count: int
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DomainError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DomainError(f"labels must lie in [0, {self.class_count})")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.ids[idx])


def _read(path) -> bytes:
    path = Path(path)
    buf = path.read_bytes()
    return gzip.decompress(buf) if path.suffix == ".gz" else buf


def _idx_header(buf: bytes, magic: int, ndim: int):
    need = 4 + 4 * ndim
    if len(buf) < need:
        # a short header is reported at the start of the field that is cut off
        raise ParseError(f"truncated IDX header at byte offset {0 if len(buf) < 4 else 4}")
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise ParseError(f"bad IDX magic 0x{got:08x} (expected 0x{magic:08x}) at byte offset 0")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    size = int(np.prod(dims))
    if len(buf) < need + size:
        raise ParseError(f"IDX payload truncated at byte offset {len(buf)}: expected {need + size} bytes")
    return dims, np.frombuffer(buf, dtype=np.uint8, count=size, offset=need)


def load_mnist(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (big-endian headers, one byte per pixel)."""
    (n, h, w), pixels = _idx_header(_read(images_path), 0x00000803, 3)
    (n_lab,), labels = _idx_header(_read(labels_path), 0x00000801, 1)
    if n != n_lab:
        raise ParseError(f"{n} images but {n_lab} labels")
    images = (pixels.reshape(n, h, w, 1) / np.float32(255)).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), 10)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10(batch_paths) -> Dataset:
    """Read CIFAR-10 binary batches: 1 label byte + 3072 channel-planar pixel bytes per record."""
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    images, labels = [], []
    base = 0
    for path in batch_paths:
        buf = _read(path)
        full, rest = divmod(len(buf), CIFAR_RECORD)
        if rest:
            raise ParseError(f"{path}: record {base + full} truncated ({rest} of {CIFAR_RECORD} bytes)")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(full, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        planes = rec[:, 1:].reshape(full, 3, 32, 32).transpose(0, 2, 3, 1)
        images.append((planes / np.float32(255)).astype(np.float32))
        base += full
    if not images:
        raise ParseError("no CIFAR batch files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), 10)


# -- teacher logits -------------------------------------------------------------------

def load_teacher_logits(path, class_count: int) -> dict[int, np.ndarray]:
    """Records of a little-endian uint32 example id followed by class_count float32 logits."""
    buf = _read(path)
    rec = 4 + 4 * class_count
    n, rest = divmod(len(buf), rec)
    if rest:
        raise ParseError(f"teacher file length {len(buf)} is not a multiple of the {rec}-byte record "
                         f"(class_count {class_count} mismatch?); record {n} misaligned")
    dt = np.dtype([("id", "<u4"), ("logits", "<f4", (class_count,))])
    arr = np.frombuffer(buf, dtype=dt, count=n)
    out = {}
    for r in arr:
        key = int(r["id"])
        if key in out:
            raise ParseError(f"duplicate example id {key}")
        out[key] = r["logits"].astype(np.float64)
    return out


def save_teacher_logits(path, logits: dict[int, np.ndarray]) -> None:
    class_count = len(next(iter(logits.values())))
    dt = np.dtype([("id", "<u4"), ("logits", "<f4", (class_count,))])
    arr = np.zeros(len(logits), dtype=dt)
    for i, (k, v) in enumerate(logits.items()):
        arr[i] = (k, v)
    Path(path).write_bytes(arr.tobytes())


# -- model containers ---------------------------------------------------------------------

MAGIC_F32 = b"CTN1"
MAGIC_I8 = b"CTq1"
_KINDS = ["ct", "avg_pool", "softmax"]
_PADS = ["valid", "same"]


def _spec_bytes(spec: NetworkSpec) -> bytes:
    out = struct.pack("<5I", *spec.input, spec.classes, len(spec.layers))
    for ls in spec.layers:
        out += struct.pack("<8I", _KINDS.index(ls.kind), ls.l, ls.K, ls.M, ls.d_out, ls.stride,
                           _PADS.index(ls.pad), 0)
    return out


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ParseError(f"model stream truncated at byte offset {self.pos}")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def array(self, dtype: str, count: int):
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise ParseError(f"model stream truncated at byte offset {self.pos}")
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr


def _read_spec(r: _Reader) -> NetworkSpec:
    h, w, d, classes, n = r.take("<5I")
    layers = []
    for _ in range(n):
        kind, l, K, M, d_out, stride, pad, _ = r.take("<8I")
        if kind >= len(_KINDS) or pad >= len(_PADS):
            raise ParseError(f"bad layer record ending at byte offset {r.pos}")
        layers.append(LayerSpec(_KINDS[kind], l, K, M, d_out, stride, _PADS[pad]))
    return NetworkSpec((h, w, d), layers, classes)


def quantize_table(table: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Affine uint8 code for one voting table: w ~ (q - zero_point) * scale."""
    lo = min(float(table.min()), 0.0)
    hi = max(float(table.max()), 0.0)
    scale = np.float32((hi - lo) / 255.0) if hi > lo else np.float32(1.0)
    zero_point = int(np.clip(round(-lo / float(scale)), 0, 255))
    q = np.clip(np.round(table / scale) + zero_point, 0, 255).astype(np.uint8)
    return q, float(scale), zero_point


def dequantize_table(q: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    return ((q.astype(np.float32) - np.float32(zero_point)) * np.float32(scale)).astype(np.float32)


def save_model(net: Network, quantized: bool = False) -> bytes:
    """Serialise to a CTN1 (float32) or CTq1 (uint8 tables) container."""
    parts = [MAGIC_I8 if quantized else MAGIC_F32, _spec_bytes(net.spec)]
    for layer in net.ct_layers:
        parts.append(layer.channels.astype("<i4").tobytes())
        bits = np.concatenate([layer.offsets, layer.thresholds[..., None]], axis=-1)
        parts.append(bits.astype("<f4").tobytes())
        if quantized:
            for m in range(layer.M):
                q, scale, zp = quantize_table(np.asarray(layer.tables[m], dtype=np.float64))
                parts.append(struct.pack("<fi", scale, zp))
                parts.append(q.tobytes())
        else:
            parts.append(layer.tables.astype("<f4").tobytes())
    return b"".join(parts)


def load_model(buf: bytes) -> Network:
    if len(buf) < 4:
        raise ParseError("model stream truncated at byte offset 0")
    magic = bytes(buf[:4])
    if magic not in (MAGIC_F32, MAGIC_I8):
        raise ParseError(f"bad model magic {magic!r} at byte offset 0")
    r = _Reader(buf, 4)
    spec = _read_spec(r)
    try:
        spec.validate()
    except DomainError as exc:
        raise ParseError(f"stored spec is inconsistent: {exc}") from None
    layers = []
    d = spec.input[2]
    for ls in spec.layers:
        if ls.kind == "avg_pool":
            layers.append(AvgPool(ls.l, ls.stride))
        if ls.kind != "ct":
            continue
        M, K = ls.M, ls.K
        channels = r.array("<i4", M * K).reshape(M, K).astype(np.int64)
        bits = r.array("<f4", M * K * 5).reshape(M, K, 5).astype(np.float32)
        if magic == MAGIC_F32:
            tables = r.array("<f4", M * 2**K * ls.d_out).reshape(M, 2**K, ls.d_out).astype(np.float32)
        else:
            tables = np.empty((M, 2**K, ls.d_out), np.float32)
            for m in range(M):
                scale, zp = r.take("<fi")
                q = r.array("u1", 2**K * ls.d_out).reshape(2**K, ls.d_out)
                tables[m] = dequantize_table(q, scale, zp)
        try:
            layers.append(CTLayer(np.ascontiguousarray(bits[..., :4]), np.ascontiguousarray(bits[..., 4]),
                                  channels, tables, ls.l, d, ls.stride, PadSpec(ls.pad)))
        except DomainError as exc:
            raise ParseError(f"layer block ending at byte offset {r.pos}: {exc}") from None
        d = ls.d_out
    if r.pos != len(buf):
        raise ParseError(f"{len(buf) - r.pos} trailing bytes after byte offset {r.pos}")
    return Network(spec, layers)


def serialized_param_count(buf: bytes) -> int:
    """Learnable parameters stored in a container (bit parameters plus table entries)."""
    net = load_model(buf)
    return sum(layer.param_count() for layer in net.ct_layers)


_MAX_FLIP_ENUM = 12


def _table_error(table, qtable, scale, words, flippable, K):
    """Per-location bound on |quantized vote - float vote| for one table, shape (H, W, D_o)."""
    err = np.full(words.shape + (table.shape[1],), scale)
    spots = np.argwhere(flippable.any(axis=-1))
    for oy, ox in spots:
        w = words[oy, ox]
        amb = np.flatnonzero(flippable[oy, ox])
        if len(amb) > _MAX_FLIP_ENUM:
            reach = np.arange(2**K)
        else:
            masks = np.arange(2 ** len(amb))
            flips = np.zeros_like(masks)
            for j, k in enumerate(amb):
                flips |= ((masks >> j) & 1) << (K - 1 - k)
            reach = w ^ flips
        err[oy, ox] = np.abs(qtable[reach] - table[w]).max(axis=0)
    return err


def quantized_logit_bound(net: Network, image: np.ndarray) -> np.ndarray:
    """Per-logit bound on |hard logits of the CTq1 copy - hard logits of ``net``| for one image.

    The error map is carried forward layer by layer.  Each table contributes at
    most its quantisation step where its word is certain; where a bit value lies
    within the propagated input error of zero the bit may flip, and the bound
    widens to the largest gap between any reachable quantised row and the
    float row actually selected.  Average pooling averages the bound.  With a
    single CT layer no bit can flip and this reduces to the sum of table scales.
    """
    x = np.asarray(image, dtype=np.float64)
    delta = np.zeros_like(x)
    for layer in net.layers:
        if isinstance(layer, CTLayer):
            vals, spread = bit_value_maps(x, layer, delta)
            K = layer.K
            words = ((vals >= 0) << np.arange(K - 1, -1, -1)).sum(axis=-1)
            flippable = np.abs(vals) <= spread
            tables = np.asarray(layer.tables, dtype=np.float64)
            new_delta = 0.0
            for m in range(layer.M):
                q, scale, zp = quantize_table(tables[m])
                qt = dequantize_table(q, scale, zp).astype(np.float64)
                new_delta = new_delta + _table_error(tables[m], qt, scale, words[..., m], flippable[:, :, m], K)
            x = forward_hard(x, layer)
            delta = np.asarray(new_delta, dtype=np.float64)
        else:
            x = avg_pool(x, layer.l, layer.stride)
            delta = avg_pool(delta, layer.l, layer.stride)
    # float32 table decoding and float64 summation order differ slightly
    return delta.reshape(-1) * (1 + 1e-6) + 1e-9
