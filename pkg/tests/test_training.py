"""
Tests the balanced loss, the optimizer, augmentation and the training loop
"""

from __future__ import annotations

import numpy as np
import pytest
from oracles import balanced_bce_loops

from srnet import nnops
from srnet.autograd import Tape, finite_diff_check
from srnet.data import Sample, batch, synthetic_sample
from srnet.model import BackboneVariant, build_variant
from srnet.nnops import softmax2_array
from srnet.tensor import Tensor, random_normal
from srnet.training import (Augmentation, EpochLog, LossConfig, OptimizerState, TrainConfig, augment,
                            augment_inverse, balanced_bce_loss, balanced_bce_loss_array, decays, fit_batch,
                            load_into, save_from, sgd_step, train)
from srnet.utils import CheckpointError, ConfigError, ShapeError

DESK = BackboneVariant.resnet(16)


def random_probs(rng, shape):
    return softmax2_array(rng.normal(scale=2.0, size=shape))


def random_mask(rng, shape, foreground=0.3):
    return (rng.random(shape) < foreground).astype(np.float64)


def synthetic_samples(count, size=64, seed=0):
    samples = []
    for index in range(count):
        image, mask = synthetic_sample(size, seed, index)
        samples.append(Sample(Tensor(image[None]), Tensor(mask[None]), f"synthetic_{index}"))
    return samples


class TestBalancedLoss:
    def test_against_loops(self):
        rng = np.random.default_rng(0)
        for case in range(50):
            n, h, w = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6)
            probs = random_probs(rng, (n, 2, h, w))
            mask = random_mask(rng, (n, 1, h, w), rng.uniform(0.1, 0.9))
            delta = None if case % 2 else float(rng.uniform(0.1, 0.9))
            normalization = "sum" if case % 3 == 0 else "pixels"
            cfg = LossConfig(delta, normalization)
            expected = balanced_bce_loops(probs, mask, delta, normalization)
            assert np.isclose(balanced_bce_loss_array(probs, mask, cfg), expected, rtol=1e-12, atol=0)

    def test_uniform_prediction(self):
        probs = np.full((2, 2, 4, 4), 0.5)
        mask = random_mask(np.random.default_rng(1), (2, 1, 4, 4))
        loss = balanced_bce_loss_array(probs, mask, LossConfig(delta=0.5))
        assert np.isclose(loss, 0.5 * np.log(2), rtol=1e-14)

    def test_automatic_delta(self):
        mask = np.zeros((3, 1, 4, 4))
        mask[0, 0, :1] = 1
        mask[2] = 1
        assert np.allclose(LossConfig().deltas(mask), [0.75, 0.95, 0.05])

    def test_automatic_delta_balances_the_classes(self):
        mask = np.zeros((1, 1, 4, 4))
        mask[0, 0, :1] = 1
        salient = balanced_bce_loss_array(np.full((1, 2, 4, 4), 0.5), mask, LossConfig(normalization="sum"))
        # a quarter of the pixels carry half of the loss
        per_pixel = np.log(2)
        assert np.isclose(salient, 0.75 * 4 * per_pixel + 0.25 * 12 * per_pixel)
        assert np.isclose(0.75 * 4, 0.25 * 12)

    def test_non_binary_mask(self):
        probs = np.full((1, 2, 2, 2), 0.5)
        with pytest.raises(ShapeError):
            balanced_bce_loss_array(probs, np.full((1, 1, 2, 2), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            balanced_bce_loss_array(np.full((1, 2, 2, 2), 0.5), np.zeros((1, 1, 2, 3)))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            LossConfig(delta=1.0)
        with pytest.raises(ConfigError):
            LossConfig(normalization="mean")

    @pytest.mark.parametrize("cfg", [LossConfig(), LossConfig(0.3, "sum")])
    def test_gradients(self, cfg):
        rng = np.random.default_rng(2)
        tape = Tape()
        logits = tape.parameter(rng.normal(size=(2, 2, 3, 3)), "logits")
        loss = balanced_bce_loss(nnops.softmax2(logits), random_mask(rng, (2, 1, 3, 3)), cfg)
        assert finite_diff_check(tape, loss) <= 1e-4


class TestOptimizer:
    def test_vanilla_step(self):
        params = {"w.weight": np.array([1.0, -2.0])}
        grads = {"w.weight": np.array([0.5, 0.25])}
        updated = sgd_step(params, grads, OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0))
        assert np.allclose(updated["w.weight"], [0.95, -2.025], rtol=0, atol=1e-15)

    def test_zero_gradient_is_a_fixed_point(self):
        params = {"w.weight": np.array([1.0, -2.0])}
        state = OptimizerState(weight_decay=0.0)
        for _ in range(3):
            params = sgd_step(params, {"w.weight": np.zeros(2)}, state)
        assert np.array_equal(params["w.weight"], [1.0, -2.0])

    def test_two_step_recurrence(self):
        lr, momentum, decay = 0.01, 0.9, 0.0005
        p0 = np.array([0.3, -0.7])
        g1, g2 = np.array([1.0, 2.0]), np.array([-0.5, 0.5])
        state = OptimizerState(lr, momentum, decay)
        p1 = sgd_step({"w.weight": p0}, {"w.weight": g1}, state)["w.weight"]
        p2 = sgd_step({"w.weight": p1}, {"w.weight": g2}, state)["w.weight"]

        v1 = g1 + decay * p0
        expected_p1 = p0 - lr * v1
        v2 = momentum * v1 + g2 + decay * expected_p1
        assert np.allclose(p1, expected_p1, rtol=1e-14, atol=0)
        assert np.allclose(p2, expected_p1 - lr * v2, rtol=1e-14, atol=0)
        assert state.steps == 2

    def test_decay_exclusions(self):
        assert decays("fusion.top1.conv.weight") and decays("fusion.top1.bn.gamma")
        assert not decays("classifier.score.bias") and not decays("fusion.top1.bn.beta")

        params = {"a.weight": np.ones(2), "a.bias": np.ones(2)}
        grads = {name: np.zeros(2) for name in params}
        updated = sgd_step(params, grads, OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.5))
        assert np.array_equal(updated["a.bias"], np.ones(2))
        assert np.allclose(updated["a.weight"], 0.95)

    def test_inputs_untouched(self):
        params = {"w.weight": np.ones(3)}
        sgd_step(params, {"w.weight": np.ones(3)}, OptimizerState())
        assert np.array_equal(params["w.weight"], np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step({"w.weight": np.ones(3)}, {"w.weight": np.ones(2)}, OptimizerState())


class TestAugmentation:
    def test_inverse(self):
        sample = synthetic_samples(1, size=32)[0]
        for seed in range(20):
            restored = augment_inverse(augment(sample, seed), seed)
            assert np.array_equal(restored.image.data, sample.image.data)
            assert np.array_equal(restored.mask.data, sample.mask.data)

    def test_mask_stays_aligned_and_binary(self):
        sample = synthetic_samples(1, size=32, seed=3)[0]
        for seed in range(20):
            plan = Augmentation.draw(seed)
            out = augment(sample, seed)
            assert np.isin(out.mask.data, (0.0, 1.0)).all()
            assert np.array_equal(out.mask.data, plan.apply(sample.mask.data))
            assert out.mask.data.sum() == sample.mask.data.sum()

    def test_every_plan_is_reachable(self):
        plans = {Augmentation.draw(seed) for seed in range(200)}
        assert {(plan.flip, plan.quarter_turns) for plan in plans} == {
            (flip, turns) for flip in (False, True) for turns in range(4)
        }

    def test_identity_plan(self):
        values = np.arange(8.0).reshape(1, 1, 2, 4)
        assert np.array_equal(Augmentation().apply(values), values)


class TestTraining:
    def test_epoch_log_csv(self):
        assert EpochLog(3, 0.5, 1.23456).csv() == "3,0.5,1.235"

    @pytest.mark.slow
    def test_fit_batch_reduces_loss(self):
        net = build_variant("HFS", DESK, seed=0)
        images, masks = batch(synthetic_samples(2))
        losses = fit_batch(net, images, masks, steps=50, optimizer=OptimizerState(lr=0.01))
        assert len(losses) == 50 and all(np.isfinite(losses))
        # Mean loss of every run of ten steps
        means = np.mean(np.reshape(losses, (5, 10)), axis=1)
        assert all(later < earlier for earlier, later in zip(means, means[1:]))
        assert losses[-1] < losses[0]

    def test_train_writes_checkpoints(self, tmp_path):
        net = build_variant("BPS", DESK, seed=1)
        samples = synthetic_samples(3)
        checkpoint = tmp_path / "model.srnc"
        logs = []
        cfg = TrainConfig(epochs=2, batch_size=2, seed=4, checkpoint_path=str(checkpoint))
        result = train(net, samples[:2], cfg, on_epoch=logs.append, held_out=samples[2:], n_thresholds=16)

        assert [log.epoch for log in result.history] == [1, 2] == [log.epoch for log in logs]
        assert result.optimizer.steps == 2
        assert result.held_out is not None and 0.0 <= result.held_out.mae <= 1.0
        assert checkpoint.exists() and not (tmp_path / "model.srnc.tmp").exists()

        restored = load_into(build_variant("BPS", DESK, seed=2), checkpoint)
        for seed in range(10):
            image = random_normal((1, 3, 64, 64), seed=seed)
            assert np.array_equal(restored.predict(image).data, net.predict(image).data)

    def test_bad_schedules(self):
        net = build_variant("BPS", DESK, seed=0)
        with pytest.raises(ConfigError):
            train(net, [], TrainConfig())
        with pytest.raises(ConfigError):
            train(net, synthetic_samples(1), TrainConfig(epochs=0))

    def test_load_into_wrong_network(self, tmp_path):
        path = tmp_path / "hfs.srnc"
        save_from(build_variant("HFS", DESK, seed=0), path)
        with pytest.raises(CheckpointError) as info:
            load_into(build_variant("SRNet", DESK, seed=0), path)
        assert info.value.path == str(path)


class TestDeskScale:
    @pytest.mark.slow
    def test_srnet_learns_synthetic_saliency(self):
        samples = synthetic_samples(250)
        train_set, held_out = samples[:200], samples[200:]
        cfg = TrainConfig(epochs=20, batch_size=4, seed=0)

        reports = {}
        for ablation in ("SRNet", "BPS"):
            net = build_variant(ablation, DESK, seed=0)
            reports[ablation] = train(net, train_set, cfg, held_out=held_out).held_out

        assert reports["SRNet"].f_beta_max >= 0.85
        assert reports["SRNet"].mae <= 0.08
        assert reports["SRNet"].mae <= reports["BPS"].mae
