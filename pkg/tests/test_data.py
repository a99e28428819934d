"""
Tests synthetic data generation, dataset loading and splitting
"""

from __future__ import annotations

import numpy as np
import pytest

from srnet.data import (Sample, batch, generate_synthetic, load_dataset, resize_nearest, split_dataset,
                        synthetic_sample)
from srnet.tensor import Tensor
from srnet.utils import ConfigError, DatasetError, ShapeError


def blank_sample(name="blank", size=4):
    return Sample(Tensor(np.zeros((1, 3, size, size))), Tensor(np.zeros((1, 1, size, size))), name)


class TestSynthetic:
    def test_deterministic(self):
        first, second = synthetic_sample(64, seed=3, index=5), synthetic_sample(64, seed=3, index=5)
        assert np.array_equal(first[0], second[0]) and np.array_equal(first[1], second[1])
        assert not np.array_equal(first[1], synthetic_sample(64, seed=3, index=6)[1])

    def test_ranges(self):
        for index in range(20):
            image, mask = synthetic_sample(64, seed=0, index=index)
            assert image.shape == (3, 64, 64) and mask.shape == (1, 64, 64)
            assert 0.0 <= image.min() and image.max() <= 1.0
            assert np.isin(mask, (0.0, 1.0)).all()
            assert 0.005 < mask.mean() < 0.7

    def test_salient_pixels_are_brighter(self):
        image, mask = synthetic_sample(64, seed=1)
        salient = mask[0] == 1
        assert image[:, salient].mean() > image[:, ~salient].mean()

    def test_rerun_is_byte_identical(self, tmp_path):
        first = generate_synthetic(tmp_path / "a", 3, 32, seed=7)
        second = generate_synthetic(tmp_path / "b", 3, 32, seed=7)
        assert [path.name for pair in first for path in pair] == [
            "img_0000.ppm",
            "mask_0000.pgm",
            "img_0001.ppm",
            "mask_0001.pgm",
            "img_0002.ppm",
            "mask_0002.pgm",
        ]
        for (image_a, mask_a), (image_b, mask_b) in zip(first, second):
            assert image_a.read_bytes() == image_b.read_bytes()
            assert mask_a.read_bytes() == mask_b.read_bytes()

    def test_bad_arguments(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_synthetic(tmp_path, 0, 64, seed=0)
        with pytest.raises(ConfigError):
            generate_synthetic(tmp_path, 1, 16, seed=0)


class TestLoading:
    def test_load_generated(self, tmp_path):
        generate_synthetic(tmp_path, 2, 32, seed=2)
        samples = load_dataset(tmp_path)
        assert [sample.name for sample in samples] == ["img_0000", "img_0001"]

        image, mask = synthetic_sample(32, seed=2, index=1)
        assert np.array_equal(samples[1].mask.data[0], mask)
        assert np.abs(samples[1].image.data[0] - image).max() <= 1 / 510 + 1e-12

    def test_resize(self, tmp_path):
        generate_synthetic(tmp_path, 1, 64, seed=2)
        (sample,) = load_dataset(tmp_path, size=32)
        assert sample.image.shape.spatial == (32, 32)
        assert np.isin(sample.mask.data, (0.0, 1.0)).all()

    def test_missing_mask(self, tmp_path):
        generate_synthetic(tmp_path, 2, 32, seed=0)
        (tmp_path / "mask_0001.pgm").unlink()
        with pytest.raises(DatasetError, match="img_0001.ppm"):
            load_dataset(tmp_path)

    def test_empty_or_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nowhere")

    def test_resize_nearest(self):
        values = np.arange(16.0).reshape(1, 4, 4)
        assert resize_nearest(values, 2).tolist() == [[[5.0, 7.0], [13.0, 15.0]]]
        assert resize_nearest(values, 4) is values


class TestSamples:
    def test_validation(self):
        with pytest.raises(ShapeError):
            Sample(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.full((1, 1, 4, 4), 0.5)))
        with pytest.raises(ShapeError):
            Sample(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 4))))
        with pytest.raises(ShapeError):
            Sample(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))

    def test_batch(self):
        images, masks = batch([blank_sample(), blank_sample()])
        assert tuple(images.shape) == (2, 3, 4, 4)
        assert tuple(masks.shape) == (2, 1, 4, 4)


class TestSplit:
    def test_deterministic_and_disjoint(self):
        samples = [blank_sample(str(index)) for index in range(8)]
        train, held_out = split_dataset(samples, 0.25, seed=1)
        assert len(held_out) == 2 and len(train) == 6
        assert sorted(sample.name for sample in train + held_out) == sorted(sample.name for sample in samples)
        again = split_dataset(samples, 0.25, seed=1)
        assert [sample.name for sample in again[1]] == [sample.name for sample in held_out]

    def test_training_keeps_one(self):
        train, held_out = split_dataset([blank_sample("a"), blank_sample("b")], 0.9, seed=0)
        assert len(train) == 1 and len(held_out) == 1

    def test_no_held_out(self):
        samples = [blank_sample()]
        assert split_dataset(samples, 0.5, seed=0) == (samples, [])
        assert split_dataset(samples * 3, 0.0, seed=0)[1] == []

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split_dataset([blank_sample()], 1.0, seed=0)
