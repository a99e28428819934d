"""
Tests PR curves, the F-measure, MAE and evaluation reports
"""

from __future__ import annotations

import numpy as np
import pytest
from oracles import mae_loops, pr_loops

from srnet.data import Sample
from srnet.evaluation import PRPoint, evaluate, evaluate_maps, f_beta_max, mae, pr_curve, thresholds
from srnet.model import BackboneVariant, build_variant
from srnet.tensor import Tensor
from srnet.utils import ConfigError, DatasetError, ShapeError


def random_maps(rng, count, size=8):
    preds = [rng.random((size, size)) for _ in range(count)]
    gts = [(rng.random((size, size)) < 0.3).astype(np.float64) for _ in range(count)]
    return preds, gts


class TestPRCurve:
    def test_against_loops(self):
        rng = np.random.default_rng(0)
        preds, gts = random_maps(rng, 5)
        gts.append(np.zeros((8, 8)))
        preds.append(rng.random((8, 8)))
        # coarse values so that some predictions land exactly on a threshold
        preds[0] = np.round(preds[0] * 64) / 64

        curve = pr_curve(preds, gts, 32)
        expected = pr_loops(preds, gts, 32)
        assert np.allclose(np.array(curve), np.array(expected), rtol=0, atol=1e-12)

    def test_thresholds(self):
        assert np.array_equal(thresholds(4), [0.125, 0.375, 0.625, 0.875])
        with pytest.raises(ConfigError):
            thresholds(0)

    def test_per_image_averaging(self):
        preds = [np.array([[1.0, 1.0], [0.0, 0.0]]), np.ones((2, 2))]
        gts = [np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones((2, 2))]
        (point,) = pr_curve(preds, gts, 1)
        # pooling the pixels of both images would give 5/6
        assert point.precision == 0.75
        assert point.recall == 1.0

    def test_nothing_predicted_has_precision_one(self):
        (point,) = pr_curve([np.zeros((2, 2))], [np.eye(2)], 1)
        assert (point.precision, point.recall) == (1.0, 0.0)

    def test_empty_ground_truth_is_skipped(self):
        rng = np.random.default_rng(1)
        preds, gts = random_maps(rng, 3)
        with_empty = pr_curve(preds + [rng.random((8, 8))], gts + [np.zeros((8, 8))], 16)
        assert with_empty == pr_curve(preds, gts, 16)

    def test_errors(self):
        with pytest.raises(DatasetError):
            pr_curve([], [])
        with pytest.raises(DatasetError):
            pr_curve([np.zeros((2, 2))], [])
        with pytest.raises(DatasetError):
            pr_curve([np.ones((2, 2))], [np.zeros((2, 2))])
        with pytest.raises(ShapeError):
            pr_curve([np.ones((2, 2))], [np.ones((2, 3))])


class TestFBeta:
    def test_closed_form(self):
        assert np.isclose(f_beta_max([PRPoint(0.5, 0.8, 0.5)], 0.3), 0.7027027, rtol=0, atol=1e-7)

    def test_takes_the_maximum(self):
        points = [PRPoint(0.1, 0.2, 1.0), PRPoint(0.5, 0.8, 0.5), PRPoint(0.9, 1.0, 0.0)]
        assert f_beta_max(points) == f_beta_max(points[1:2])

    def test_zero_over_zero(self):
        assert f_beta_max([PRPoint(0.5, 0.0, 0.0)]) == 0.0

    def test_errors(self):
        with pytest.raises(ConfigError):
            f_beta_max([PRPoint(0.5, 0.8, 0.5)], 0.0)
        with pytest.raises(DatasetError):
            f_beta_max([])


class TestMAE:
    def test_against_loops(self):
        rng = np.random.default_rng(2)
        pred, gt = rng.random((7, 5)), (rng.random((7, 5)) < 0.5).astype(np.float64)
        assert np.isclose(mae(pred, gt), mae_loops(pred, gt), rtol=1e-12)

    def test_accepts_tensors(self):
        gt = np.eye(4)
        assert mae(Tensor(np.full((1, 1, 4, 4), 0.25)), gt) == 0.25 * 12 / 16 + 0.75 * 4 / 16

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mae(np.zeros((2, 2)), np.zeros((3, 3)))


class TestReports:
    def test_perfect_predictor(self):
        _, gts = random_maps(np.random.default_rng(3), 4)
        report = evaluate_maps(gts, gts, 64)
        assert report.f_beta_max == 1.0
        assert report.mae == 0.0
        assert report.images == 4

    def test_uniform_prediction(self):
        gt = np.zeros((4, 4))
        gt[:1] = 1
        report = evaluate_maps([np.full((4, 4), 0.5)], [gt])
        # every pixel is salient up to t = 0.5, none beyond
        assert np.isclose(report.f_beta_max, 1.3 * 0.25 / (0.3 * 0.25 + 1.0))
        assert report.mae == 0.5

    def test_csv(self):
        _, gts = random_maps(np.random.default_rng(4), 2)
        lines = evaluate_maps(gts, gts, 8).csv_lines()
        assert lines[0] == "threshold,precision,recall"
        assert len(lines) == 8 + 3
        assert lines[1] == "0.0625,1.0,1.0"
        assert lines[-2:] == ["fbeta_max,1.0", "mae,0.0"]

    def test_evaluate_network(self):
        net = build_variant("HFS", BackboneVariant.resnet(16), seed=0)
        net.params["classifier.score.weight"] = np.zeros_like(net.params["classifier.score.weight"])
        mask = np.zeros((1, 1, 64, 64))
        mask[..., 16:48, 16:48] = 1
        samples = [Sample(Tensor(np.full((1, 3, 64, 64), 0.5)), Tensor(mask), "square")]
        report = evaluate(net, samples, 16)
        assert report.names == ["square"]
        assert np.isclose(report.mae, 0.5)
