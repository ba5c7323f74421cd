from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import MNIST_DIR, random_layer
from gradcheck import gradcheck

from ctnet.data import Dataset
from ctnet.fern import SoftConfig
from ctnet.layer import CTLayer, bit_value_maps, forward_soft
from ctnet.network import NetworkSpec, build, ct, desk_mnist_spec, pool, six_layer_spec
from ctnet.tensor import DomainError
from ctnet.training import (AnnealSchedule, DistillConfig, TrainConfig, anneal_step, backward_soft_ct,
                            backward_train, cross_entropy, cross_entropy_grad, distill_grad, distill_loss,
                            forward_train, grouped_head, grouped_head_backward, sgd_step, softmax,
                            split_lower_upper, train_three_phase)


def naive_ce(z, y):
    e = np.exp(z)
    return -math.log(e[y] / e.sum())


def naive_distill(z, zt, alpha, temp, y):
    p = np.exp(zt / temp) / np.exp(zt / temp).sum()
    q = np.exp(z / temp) / np.exp(z / temp).sum()
    kl = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    return alpha * naive_ce(z, y) + (1 - alpha) * temp**2 * kl


def tiny_dataset(rng, n=24, shape=(12, 12, 1), classes=3):
    images = rng.random((n,) + shape)
    labels = rng.integers(0, classes, n)
    # plant a weak class signal so training has something to find
    for i, y in enumerate(labels):
        images[i, 2 + 3 * y:5 + 3 * y, 2:10] += 0.8
    return Dataset(images, labels, classes, np.arange(n, dtype=np.uint32))


def tiny_spec():
    return NetworkSpec((12, 12, 1), [ct(3, 3, 2, 6), pool(2, 2), ct(3, 3, 2, 3), pool(3)], 3)


class TestSoftBackward:
    def test_finite_differences(self, rng):
        layer = random_layer(rng, d_in=3, l=5, K=4, M=2, d_out=3)
        x = rng.random((8, 8, 3))
        G = rng.normal(size=layer.output_shape(8, 8))
        checks, skipped = gradcheck(layer, x, G)
        bad = [c for c in checks if not c.ok()]
        assert not bad, bad[:5]
        assert len(checks) > 10 * skipped

    def test_saturated_bits_carry_no_parameter_gradient(self, rng):
        layer = random_layer(rng, K=4, M=2)
        x = rng.random((8, 8, 3))
        t = 0.5 * np.abs(bit_value_maps(x, layer)).min()
        out, cache = forward_soft(x, layer, SoftConfig(t, 0.0))
        b = backward_soft_ct(cache, rng.normal(size=out.shape))
        assert not b.d_offsets.any() and not b.d_thresholds.any() and not b.d_input.any()
        assert b.d_tables.any()
        assert b.d_params.shape == (2, 4, 5)

    def test_threshold_gradient_is_minus_value_gradient(self, rng):
        # shifting every input pixel of a single-channel layer by c leaves values unchanged;
        # shifting th by c moves every value by -c, which is what the threshold gradient records
        layer = random_layer(rng, d_in=1, K=3, M=1, d_out=2)
        x = rng.random((7, 7, 1))
        out, cache = forward_soft(x, layer, SoftConfig(2.0, 0.0))
        G = rng.normal(size=out.shape)
        b = backward_soft_ct(cache, G)
        h = 1e-6
        layer.thresholds[0, 0] += h
        up = float(np.sum(forward_soft(x, layer, SoftConfig(2.0, 0.0))[0] * G))
        layer.thresholds[0, 0] -= 2 * h
        dn = float(np.sum(forward_soft(x, layer, SoftConfig(2.0, 0.0))[0] * G))
        assert b.d_thresholds[0, 0] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-9)


class TestLosses:
    def test_uniform_logits(self):
        assert cross_entropy(np.zeros(10), 3) == pytest.approx(math.log(10), abs=1e-12)

    def test_large_margin(self):
        z = np.zeros(10)
        z[4] = 800.0
        assert cross_entropy(z, 4) == pytest.approx(0.0, abs=1e-12)

    def test_naive_oracle(self, rng):
        for _ in range(20):
            z = rng.normal(0, 3, 10)
            y = int(rng.integers(10))
            assert cross_entropy(z, y) == pytest.approx(naive_ce(z, y), abs=1e-10)

    def test_grad(self, rng):
        z = rng.normal(size=5)
        g = cross_entropy_grad(z, 2)
        h = 1e-6
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            assert g[i] == pytest.approx((cross_entropy(z + e, 2) - cross_entropy(z - e, 2)) / (2 * h), abs=1e-8)

    def test_label_range(self):
        with pytest.raises(DomainError):
            cross_entropy(np.zeros(3), 3)

    def test_softmax_sums_to_one(self, rng):
        assert softmax(rng.normal(0, 50, 10)).sum() == pytest.approx(1.0, abs=1e-12)


class TestDistill:
    def test_alpha_one_is_cross_entropy(self, rng):
        z, zt = rng.normal(size=10), rng.normal(size=10)
        assert distill_loss(z, zt, DistillConfig(alpha=1.0), 7) == cross_entropy(z, 7)

    def test_self_divergence(self, rng):
        z = rng.normal(size=10)
        assert distill_loss(z, z, DistillConfig(alpha=0.0), 0) == pytest.approx(0.0, abs=1e-14)

    def test_naive_oracle(self, rng):
        for _ in range(20):
            z, zt = rng.normal(0, 2, 10), rng.normal(0, 2, 10)
            got = distill_loss(z, zt, DistillConfig(alpha=0.3), 1, temp=4.0)
            assert got == pytest.approx(naive_distill(z, zt, 0.3, 4.0, 1), abs=1e-10)

    def test_grad(self, rng):
        z, zt = rng.normal(size=6), rng.normal(size=6)
        cfg = DistillConfig(alpha=0.4)
        g = distill_grad(z, zt, cfg, 3, 2.5)
        h = 1e-6
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            num = (distill_loss(z + e, zt, cfg, 3, 2.5) - distill_loss(z - e, zt, cfg, 3, 2.5)) / (2 * h)
            assert g[i] == pytest.approx(num, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            distill_loss(np.zeros(3), np.zeros(4), DistillConfig(), 0)

    def test_validation_and_schedule(self):
        with pytest.raises(DomainError):
            DistillConfig(alpha=1.5)
        with pytest.raises(DomainError):
            DistillConfig(temp_end=0.5)
        cfg = DistillConfig(temp_start=4.0, temp_end=1.0)
        assert cfg.temperature(0) == 4.0 and cfg.temperature(1) == 1.0 and cfg.temperature(0.5) == 2.5


class TestSgd:
    def test_zero_gradient(self, rng):
        p = rng.normal(size=4)
        before = p.copy()
        sgd_step([p], [np.zeros(4)], [np.zeros(4)], 0.1)
        np.testing.assert_array_equal(p, before)

    def test_plain_descent(self, rng):
        p, g = rng.normal(size=4), rng.normal(size=4)
        expected = p - 0.1 * g
        sgd_step([p], [g], [np.zeros(4)], 0.1, momentum=0.0)
        np.testing.assert_allclose(p, expected, atol=1e-15)

    def test_two_steps_unrolled(self, rng):
        p0, g1, g2 = rng.normal(size=(3, 5))
        p, v = p0.copy(), np.zeros(5)
        sgd_step([p], [g1], [v], 0.05, 0.9)
        sgd_step([p], [g2], [v], 0.05, 0.9)
        v1 = g1
        v2 = 0.9 * v1 + g2
        np.testing.assert_allclose(p, p0 - 0.05 * v1 - 0.05 * v2, atol=1e-12)


class TestAnneal:
    def test_start(self):
        assert AnnealSchedule().fraction(0) == 0.2

    def test_decay(self):
        assert AnnealSchedule(decay=0.8).fraction(3) == pytest.approx(0.1024, abs=1e-15)

    def test_floor(self):
        assert AnnealSchedule(f_floor=0.01).fraction(100) == 0.01

    def test_step_calibrates(self, rng):
        v = np.abs(rng.normal(size=5000))
        f, t = anneal_step(AnnealSchedule(), 0, v)
        assert f == 0.2 and np.mean(v <= t) == pytest.approx(0.2, abs=1e-3)

    def test_step_floors_t(self):
        _, t = anneal_step(AnnealSchedule(), 0, np.zeros(10))
        assert t == 1e-9

    def test_validation(self):
        with pytest.raises(DomainError):
            AnnealSchedule(decay=1.0)
        with pytest.raises(DomainError):
            AnnealSchedule(f0=0.001)
        with pytest.raises(DomainError):
            AnnealSchedule(t0=0.0)
        with pytest.raises(DomainError):
            anneal_step(AnnealSchedule(), 0, [])


class TestNetworkBackward:
    def test_matches_finite_difference_on_loss(self, rng):
        net = build(tiny_spec(), seed=3, dtype=np.float64)
        x = rng.random((12, 12, 1))
        cfgs = [SoftConfig(1.0, 0.0), SoftConfig(1.0, 0.0)]
        out, trace = forward_train(net, x, cfgs)
        g = cross_entropy_grad(out.reshape(-1), 1).reshape(out.shape)
        grads = backward_train(net, trace, g, [True, True])
        lower = net.ct_layers[0]
        h = 1e-6

        def loss():
            return cross_entropy(forward_train(net, x, cfgs)[0].reshape(-1), 1)

        for idx in [(0, 0, 1), (1, 2, 0), (1, 7, 5)]:
            orig = lower.tables[idx]
            lower.tables[idx] = orig + h
            up = loss()
            lower.tables[idx] = orig - h
            dn = loss()
            lower.tables[idx] = orig
            assert grads[0].d_tables[idx] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-10)

    def test_frozen_layers_get_no_gradient(self, rng):
        net = build(tiny_spec(), seed=3)
        out, trace = forward_train(net, rng.random((12, 12, 1)), [SoftConfig(0.5)] * 2)
        grads = backward_train(net, trace, np.ones(out.shape), [False, True])
        assert set(grads) == {1}

    def test_slope_scale(self, rng):
        net = build(tiny_spec(), seed=3)
        x = rng.random((12, 12, 1))
        out, trace = forward_train(net, x, [SoftConfig(0.5)] * 2)
        g = rng.normal(size=out.shape)
        plain = backward_train(net, trace, g, [True, True])
        scaled = backward_train(net, trace, g, [True, True], slope_scale=[2.0, 3.0])
        np.testing.assert_allclose(scaled[1].d_offsets, 3 * plain[1].d_offsets)
        np.testing.assert_allclose(scaled[1].d_tables, plain[1].d_tables)
        # the lower layer sees the upper layer's scale through d_input, then its own
        np.testing.assert_allclose(scaled[0].d_thresholds, 6 * plain[0].d_thresholds)
        np.testing.assert_allclose(scaled[0].d_tables, 3 * plain[0].d_tables)

    def test_grouped_head_adjoint(self, rng):
        f = rng.normal(size=(4, 5, 12))
        g = rng.normal(size=10)
        lhs = float(grouped_head(f, 10) @ g)
        rhs = float(np.sum(f * grouped_head_backward(g, f.shape, 10)))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_grouped_head_needs_channels(self, rng):
        with pytest.raises(DomainError):
            grouped_head(rng.normal(size=(2, 2, 5)), 10)


class TestThreePhase:
    def test_split(self):
        net = build(six_layer_spec())
        split = split_lower_upper(net)
        lower = [x for x in net.layers[:split] if isinstance(x, CTLayer)]
        assert len(lower) == 3 and len(net.ct_layers) - len(lower) == 3

    def test_split_needs_two_ct_layers(self):
        spec = NetworkSpec((5, 5, 1), [ct(5, 2, 1, 2)], 2)
        with pytest.raises(DomainError):
            split_lower_upper(build(spec))

    def test_phase_two_freezes_lower_half(self, rng):
        data = tiny_dataset(rng)
        net = build(tiny_spec(), seed=1, threshold_sigma=0.25)
        snapshots = []

        def record(row):
            lower = net.ct_layers[0]
            snapshots.append((row["phase"], lower.offsets.copy(), lower.thresholds.copy(), lower.tables.copy()))

        cfg = TrainConfig(epochs=(1, 2, 1), batch_size=8, lr=0.1)
        train_three_phase(net, data, cfg, callback=record)
        phases = [s[0] for s in snapshots]
        assert phases == [1, 2, 2, 3]
        for a, b in zip(snapshots[0][1:], snapshots[2][1:]):
            np.testing.assert_array_equal(a, b)
        assert not np.array_equal(snapshots[2][3], snapshots[3][3])

    def test_history_and_soft_t(self, rng):
        data = tiny_dataset(rng)
        net, hist = train_three_phase(build(tiny_spec(), seed=1), data, TrainConfig(epochs=(1, 1, 1), batch_size=8),
                                      eval_data=data)
        assert [r["epoch"] for r in hist] == [1, 2, 3]
        assert len(net.soft_t) == 2 and all(t > 0 for t in net.soft_t)
        assert "val_err" in hist[-1] and "val_err" not in hist[0]

    def test_deterministic(self, rng):
        data = tiny_dataset(rng)
        cfg = TrainConfig(epochs=(1, 1, 1), batch_size=8)
        a, _ = train_three_phase(build(tiny_spec(), seed=2), data, cfg)
        b, _ = train_three_phase(build(tiny_spec(), seed=2), data, cfg)
        for la, lb in zip(a.ct_layers, b.ct_layers):
            np.testing.assert_array_equal(la.tables, lb.tables)

    def test_workers_match_serial(self, rng):
        data = tiny_dataset(rng)
        a, _ = train_three_phase(build(tiny_spec(), seed=2), data, TrainConfig(epochs=(1, 1, 1), batch_size=8))
        b, _ = train_three_phase(build(tiny_spec(), seed=2), data,
                                 TrainConfig(epochs=(1, 1, 1), batch_size=8, workers=2))
        for la, lb in zip(a.ct_layers, b.ct_layers):
            np.testing.assert_allclose(la.tables, lb.tables, atol=1e-5)

    def test_errors(self, rng):
        data = tiny_dataset(rng)
        with pytest.raises(DomainError):
            train_three_phase(build(tiny_spec()), data, TrainConfig(distill=DistillConfig()))
        with pytest.raises(DomainError):
            train_three_phase(build(tiny_spec()), data.subset([]))

    def test_distillation_phase(self, rng):
        data = tiny_dataset(rng)
        teacher = {int(i): rng.normal(size=3).astype(np.float32) for i in data.ids}
        cfg = TrainConfig(epochs=(1, 1, 1), batch_size=8, distill=DistillConfig(alpha=0.5))
        _, hist = train_three_phase(build(tiny_spec(), seed=2), data, cfg, teacher=teacher)
        assert np.isfinite(hist[-1]["loss"])

    @pytest.mark.slow
    @pytest.mark.skipif(not MNIST_DIR.exists(), reason="MNIST not available")
    def test_phase_one_best_loss_on_mnist_subset(self):
        from ctnet.cli import load_split
        data = load_split("mnist", str(MNIST_DIR), "train", 500)
        net = build(desk_mnist_spec(), seed=0, threshold_sigma=0.25)
        _, hist = train_three_phase(net, data, TrainConfig(epochs=(3, 0, 0)))
        best = np.minimum.accumulate([r["loss"] for r in hist])
        assert (np.diff(best) <= 0).all()
        assert best[-1] < math.log(10)
