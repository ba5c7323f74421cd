from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from ctnet.fern import SoftConfig, word_hard, word_soft
from ctnet.layer import CTLayer, sparse_vote
from ctnet.tensor import PadSpec, pad_same

MNIST_DIR = Path(os.environ.get("CTNET_MNIST_DIR", "/root/data/mnist"))

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test gates")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = ""
        for name, text in rep.user_properties:
            if name == "detail":
                detail = text
        _criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number:2d} {status}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement to the acceptance summary."""
    return lambda text: record_property("detail", text)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_layer(rng, d_in=3, l=5, K=4, M=2, d_out=3, stride=1, pad="valid", threshold_sigma=0.3):
    return CTLayer.random(rng, d_in, l, K, M, d_out, stride, PadSpec(pad), threshold_sigma=threshold_sigma,
                          dtype=np.float64)


def reference_forward(x, layer: CTLayer, cfg: SoftConfig | None = None):
    """Per-location loop over the fern-level functions; hard when cfg is None."""
    x = np.asarray(x, dtype=np.float64)
    xp = pad_same(x, layer.radius, layer.pad.fill) if layer.pad.mode == "same" else x
    ho, wo, d = layer.output_shape(x.shape[0], x.shape[1])
    out = np.zeros((ho, wo, d))
    for ct in layer.conv_tables():
        for oy in range(ho):
            for ox in range(wo):
                px = ox * layer.stride + layer.radius
                py = oy * layer.stride + layer.radius
                if cfg is None:
                    out[oy, ox] += ct.table[word_hard(xp, px, py, ct.calculator)]
                else:
                    out[oy, ox] += sparse_vote(word_soft(xp, px, py, ct.calculator, cfg), ct.table)
    return out
