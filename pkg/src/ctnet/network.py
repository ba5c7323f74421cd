"""Sequential CT networks: specs, builders, forward passes and cost reports."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .fern import SoftConfig
from .layer import CTLayer, forward_hard, forward_soft, layer_op_count
from .tensor import DomainError, PadSpec, avg_pool, output_extent


class BuildError(DomainError):
    """Raised for a network spec whose layer shapes do not compose."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    l: int = 1
    K: int = 0
    M: int = 0
    d_out: int = 0
    stride: int = 1
    pad: str = "valid"


def ct(l, K, M, d_out, stride=1, pad="valid") -> LayerSpec:
    return LayerSpec("ct", l, K, M, d_out, stride, pad)


def pool(l, stride=1) -> LayerSpec:
    return LayerSpec("avg_pool", l, stride=stride)


@dataclass
class NetworkSpec:
    input: tuple[int, int, int]
    layers: list[LayerSpec]
    classes: int

    def shapes(self) -> list[tuple[int, int, int]]:
        """Output shape after every layer; raises BuildError at the first inconsistency."""
        h, w, d = self.input
        out = []
        for i, ls in enumerate(self.layers):
            where = f"layer {i + 1} ({ls.kind})"
            try:
                if ls.kind == "ct":
                    if ls.l % 2 == 0 or ls.l < 1:
                        raise BuildError(f"{where}: patch size {ls.l} must be odd")
                    if ls.K < 1 or ls.M < 1 or ls.d_out < 1:
                        raise BuildError(f"{where}: K, M and d_out must be positive")
                    h = output_extent(h, ls.l, ls.stride, ls.pad)
                    w = output_extent(w, ls.l, ls.stride, ls.pad)
                    d = ls.d_out
                elif ls.kind == "avg_pool":
                    if ls.l > min(h, w):
                        raise BuildError(f"{where}: pool window {ls.l} exceeds input {h}x{w}")
                    h = output_extent(h, ls.l, ls.stride)
                    w = output_extent(w, ls.l, ls.stride)
                elif ls.kind == "softmax":
                    if i != len(self.layers) - 1:
                        raise BuildError(f"{where}: softmax may only be the last layer")
                else:
                    raise BuildError(f"{where}: unknown kind {ls.kind!r}")
            except BuildError:
                raise
            except DomainError as exc:
                raise BuildError(f"{where}: {exc}") from None
            out.append((h, w, d))
        return out

    def validate(self) -> None:
        shapes = self.shapes()
        final = shapes[-1] if shapes else tuple(self.input)
        if final != (1, 1, self.classes):
            raise BuildError(f"final output {final} does not collapse to 1x1x{self.classes}")


@dataclass(frozen=True)
class AvgPool:
    l: int
    stride: int = 1


@dataclass
class Network:
    spec: NetworkSpec
    layers: list = field(default_factory=list)
    soft_t: list | None = None   # per-CT-layer t at the end of training, if trained

    @property
    def ct_layers(self) -> list[CTLayer]:
        return [layer for layer in self.layers if isinstance(layer, CTLayer)]

    def copy(self) -> "Network":
        layers = [x.copy() if isinstance(x, CTLayer) else x for x in self.layers]
        return Network(self.spec, layers, None if self.soft_t is None else list(self.soft_t))


def build(spec: NetworkSpec, seed: int = 0, sigma: float = 1.0, threshold_sigma: float | None = None,
          table_sigma: float | None = None, dtype=np.float32) -> Network:
    """Materialise a spec with seeded Gaussian parameters."""
    spec.validate()
    rng = np.random.default_rng(seed)
    d = spec.input[2]
    layers = []
    for ls in spec.layers:
        if ls.kind == "ct":
            layers.append(CTLayer.random(
                rng, d, ls.l, ls.K, ls.M, ls.d_out, ls.stride, PadSpec(ls.pad), sigma=sigma,
                threshold_sigma=sigma if threshold_sigma is None else threshold_sigma,
                table_sigma=sigma if table_sigma is None else table_sigma, dtype=dtype))
            d = ls.d_out
        elif ls.kind == "avg_pool":
            layers.append(AvgPool(ls.l, ls.stride))
    return Network(spec, layers)


def soft_configs(net: Network, mode) -> list[SoftConfig]:
    n = len(net.ct_layers)
    if isinstance(mode, SoftConfig):
        return [mode] * n
    cfgs = list(mode)
    if len(cfgs) != n:
        raise DomainError(f"need one SoftConfig per CT layer ({n}), got {len(cfgs)}")
    return cfgs


def forward_features(net: Network, image: np.ndarray, mode="hard", upto: int | None = None) -> np.ndarray:
    """Run the first ``upto`` layers (all by default) and return the activation map."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape != tuple(net.spec.input):
        raise DomainError(f"image shape {x.shape} does not match network input {tuple(net.spec.input)}")
    cfgs = None if mode == "hard" else iter(soft_configs(net, mode))
    for layer in net.layers[:upto]:
        if isinstance(layer, CTLayer):
            x = forward_hard(x, layer) if cfgs is None else forward_soft(x, layer, next(cfgs))[0]
        else:
            x = avg_pool(x, layer.l, layer.stride)
    return x


def forward(net: Network, image: np.ndarray, mode="hard") -> np.ndarray:
    """Raw logits (no softmax).  ``mode`` is "hard", a SoftConfig or one SoftConfig per CT layer."""
    return forward_features(net, image, mode).reshape(-1)


def predict(net: Network, images, mode="hard") -> np.ndarray:
    return np.array([int(np.argmax(forward(net, im, mode))) for im in images])


def evaluate(net: Network, dataset, mode="hard") -> float:
    """Fraction of misclassified examples."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    pred = predict(net, dataset.images, mode)
    return float(np.mean(pred != np.asarray(dataset.labels)))


# -- cost ------------------------------------------------------------------------

@dataclass
class CostReport:
    ops_cnn: float = 0
    ops_ct: float = 0
    params: int = 0
    bytes_f32: int = 0
    bytes_i8: int = 0

    @property
    def ratio(self) -> float:
        return self.ops_cnn / self.ops_ct if self.ops_cnn > 0 and self.ops_ct > 0 else float("nan")


def network_cost(net: Network, c_b: float = 10) -> CostReport:
    """Whole-network op counts, learnable parameter count and storage sizes."""
    from .bench import cost_cnn, memory_model

    report = CostReport()
    d = net.spec.input[2]
    shapes = net.spec.shapes()
    layer_iter = iter(net.layers)
    mem = []
    for ls, (ho, wo, do) in zip(net.spec.layers, shapes):
        if ls.kind in ("ct", "avg_pool"):
            layer = next(layer_iter)
        if ls.kind == "ct":
            locations = ho * wo
            report.ops_ct += layer_op_count(layer, c_b) * locations
            report.ops_cnn += cost_cnn(layer.patch_size, d, layer.d_out) * locations
            report.params += layer.param_count()
            mem.append((layer.M, layer.K, layer.d_out, layer.offsets.size + layer.thresholds.size))
        d = do
    report.bytes_f32 = memory_model(mem, "f32")
    report.bytes_i8 = memory_model(mem, "i8")
    return report


# -- standard topologies ------------------------------------------------------------

def six_layer_spec(classes: int = 10) -> NetworkSpec:
    """Six CT layers on 32x32x3 (CIFAR / SVHN)."""
    return NetworkSpec((32, 32, 3), [
        ct(7, 8, 8, 32), pool(3), ct(5, 8, 8, 32), pool(3), ct(5, 8, 8, 64), pool(3),
        ct(5, 8, 8, 128), pool(2), ct(3, 8, 8, 64), pool(2), ct(3, 8, 8, classes), pool(2),
        LayerSpec("softmax"),
    ], classes)


def four_layer_spec(classes: int = 10) -> NetworkSpec:
    """Four CT layers on 32x32x3."""
    return NetworkSpec((32, 32, 3), [
        ct(7, 8, 8, 32), pool(3), ct(7, 8, 8, 32), pool(3), ct(7, 8, 8, 64), pool(3),
        ct(7, 8, 8, classes), pool(2), LayerSpec("softmax"),
    ], classes)


def two_layer_mnist_spec() -> NetworkSpec:
    """Two CT layers on 28x28x1 MNIST digits."""
    return NetworkSpec((28, 28, 1), [
        ct(9, 10, 10, 100), pool(7), ct(9, 10, 10, 10), pool(6), LayerSpec("softmax"),
    ], 10)


def face_spec(classes: int = 50) -> NetworkSpec:
    """Six CT layers on 64x64x3 face crops."""
    return NetworkSpec((64, 64, 3), [
        ct(9, 8, 8, 32), pool(5), ct(9, 8, 8, 32), pool(5), ct(9, 8, 8, 64), pool(3),
        ct(9, 8, 8, 128), pool(3), ct(9, 8, 8, 256), pool(3), ct(9, 8, 8, classes), pool(2),
        LayerSpec("softmax"),
    ], classes)


def desk_mnist_spec(l: int = 5, K: int = 6, M: int = 4, hidden: int = 32, M_top: int | None = None) -> NetworkSpec:
    """Reduced two-layer MNIST net that trains in minutes on one core."""
    h1 = 28 - l + 1
    h2 = (h1 - 4) // 2 + 1
    h3 = h2 - l + 1
    return NetworkSpec((28, 28, 1), [
        ct(l, K, M, hidden), pool(4, 2), ct(l, K, M_top or M, 10), pool(h3), LayerSpec("softmax"),
    ], 10)


# -- architecture config files ----------------------------------------------------------

_INT_KEYS = {"l", "K", "M", "d_out", "stride", "height", "width", "depth", "classes"}


def parse_config(text: str) -> NetworkSpec:
    """Parse the sectioned architecture format.

    ::

        [input]
        height = 28
        width = 28
        depth = 1
        classes = 10

        [layer]
        kind = ct
        l = 5
        K = 6
        M = 4
        d_out = 32

    Any number of ``[layer]`` sections may follow, in order.
    """
    sections: list[tuple[str, int, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"\[(\w+)\]", line)
        if m:
            if m.group(1) not in ("input", "layer"):
                raise BuildError(f"line {lineno}: unknown section [{m.group(1)}]")
            sections.append((m.group(1), lineno, {}))
            continue
        if "=" not in line:
            raise BuildError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if not sections:
            raise BuildError(f"line {lineno}: key outside of any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _INT_KEYS:
            try:
                value = int(value)
            except ValueError:
                raise BuildError(f"line {lineno}: {key} must be an integer, got {value!r}") from None
        sections[-1][2][(key, lineno)] = value

    inputs = [s for s in sections if s[0] == "input"]
    if len(inputs) != 1:
        raise BuildError(f"line {inputs[1][1] if inputs else 1}: exactly one [input] section required")
    vals = {k: v for (k, _), v in inputs[0][2].items()}
    for key in ("height", "width", "depth", "classes"):
        if key not in vals:
            raise BuildError(f"line {inputs[0][1]}: [input] is missing '{key}'")
    layers = []
    allowed = {"kind", "l", "K", "M", "d_out", "stride", "pad"}
    for name, lineno, items in sections:
        if name != "layer":
            continue
        kw = {}
        for (key, kl), value in items.items():
            if key not in allowed:
                raise BuildError(f"line {kl}: unknown layer key '{key}'")
            kw[key] = value
        if "kind" not in kw:
            raise BuildError(f"line {lineno}: layer section lacks 'kind'")
        if kw["kind"] not in ("ct", "avg_pool", "softmax"):
            raise BuildError(f"line {lineno}: unknown layer kind {kw['kind']!r}")
        if kw.get("pad", "valid") not in ("valid", "same"):
            raise BuildError(f"line {lineno}: pad must be 'valid' or 'same'")
        layers.append((lineno, LayerSpec(**kw)))
    spec = NetworkSpec((vals["height"], vals["width"], vals["depth"]), [ls for _, ls in layers], vals["classes"])
    try:
        spec.validate()
    except BuildError as exc:
        m = re.match(r"layer (\d+)", str(exc))
        lineno = layers[int(m.group(1)) - 1][0] if m else (layers[-1][0] if layers else inputs[0][1])
        raise BuildError(f"line {lineno}: {exc}") from None
    return spec


def format_config(spec: NetworkSpec) -> str:
    h, w, d = spec.input
    lines = ["[input]", f"height = {h}", f"width = {w}", f"depth = {d}", f"classes = {spec.classes}"]
    for ls in spec.layers:
        lines += ["", "[layer]", f"kind = {ls.kind}"]
        if ls.kind == "ct":
            lines += [f"l = {ls.l}", f"K = {ls.K}", f"M = {ls.M}", f"d_out = {ls.d_out}",
                      f"stride = {ls.stride}", f"pad = {ls.pad}"]
        elif ls.kind == "avg_pool":
            lines += [f"l = {ls.l}", f"stride = {ls.stride}"]
    return "\n".join(lines) + "\n"
