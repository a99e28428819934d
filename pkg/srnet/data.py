"""
This module contains the :class:`Sample` type, the synthetic dataset
generator, the directory loader and the train/held-out split.

A dataset directory holds pairs ``img_XXXX.ppm`` / ``mask_XXXX.pgm``.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import logging
import os
import pathlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from . import _pnm
    from .tensor import Tensor, stack_batch
    from .utils import ConfigError, DatasetError, ShapeError
except ImportError:
    import _pnm
    from tensor import Tensor, stack_batch
    from utils import ConfigError, DatasetError, ShapeError

logger = logging.getLogger(__name__)

IMAGE_PATTERN = "img_{index:04d}.ppm"
MASK_PATTERN = "mask_{index:04d}.pgm"
MIN_SYNTHETIC_SIZE = 32
SHAPE_KINDS = ("ellipse", "rectangle", "triangle")


@dataclass
class Sample:
    """
    One image and its ground truth.

    :ivar Tensor image: ``(1, 3, H, W)`` with values in [0, 1].
    :ivar Tensor mask: ``(1, 1, H, W)``, strictly 0 or 1.
    :ivar str name: Where it came from, for reports.

    :raises ShapeError: If the mask is not binary or the sizes differ.
    """

    image: Tensor
    mask: Tensor
    name: str = ""

    def __post_init__(self):
        if self.image.shape.c != 3 or self.mask.shape.c != 1:
            raise ShapeError(f"Expected a 3-channel image and 1-channel mask, got {self.image.shape}, {self.mask.shape}")
        if self.image.shape.spatial != self.mask.shape.spatial or self.image.shape.n != self.mask.shape.n:
            raise ShapeError(f"Image {self.image.shape} and mask {self.mask.shape} differ in size")
        if not np.isin(self.mask.data, (0.0, 1.0)).all():
            raise ShapeError(f"Mask of {self.name or 'sample'} is not binary")

    @property
    def pixels(self) -> int:
        return self.mask.shape.h * self.mask.shape.w


def batch(samples: Sequence[Sample]) -> Tuple[Tensor, Tensor]:
    """Stacks images and masks along the batch dimension."""
    return stack_batch([sample.image for sample in samples]), stack_batch([sample.mask for sample in samples])


# Synthetic data


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:size, 0:size].astype(np.float64) + 0.5


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = _grid(size)
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    if kind == "ellipse":
        a, b = rng.uniform(0.08, 0.25, size=2) * size
        angle = rng.uniform(0, np.pi)
        u = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle)
        v = -(xs - cx) * np.sin(angle) + (ys - cy) * np.cos(angle)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        half_h, half_w = rng.uniform(0.075, 0.2, size=2) * size
        return (np.abs(ys - cy) <= half_h) & (np.abs(xs - cx) <= half_w)

    radius = rng.uniform(0.12, 0.3) * size
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, size=3)
    corners = np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)
    signs = []
    for (x0, y0), (x1, y1) in zip(corners, np.roll(corners, -1, axis=0)):
        signs.append((x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0)
    return (signs[0] & signs[1] & signs[2]) | (~signs[0] & ~signs[1] & ~signs[2])


def synthetic_sample(size: int, seed: int, index: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draws one image: 1 to 3 bright shapes (ellipse, rectangle, triangle) on a
    darker textured background, plus additive noise.

    :return: The image ``(3, size, size)`` in [0, 1] and the binary mask
        ``(1, size, size)``, the exact union of the shapes.
    :rtype: tuple[numpy.ndarray, numpy.ndarray]
    """

    rng = np.random.default_rng([seed, index])
    ys, xs = _grid(size)

    base = rng.uniform(0.1, 0.35, size=3)
    frequency = rng.uniform(2, 6, size=2) * 2 * np.pi / size
    texture = 0.06 * np.sin(frequency[0] * xs + rng.uniform(0, 2 * np.pi)) * np.cos(frequency[1] * ys)
    image = base[:, None, None] + texture[None] + rng.normal(0, 0.02, size=(3, size, size))

    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        shape = _shape_mask(SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))], size, rng)
        image[:, shape] = rng.uniform(0.6, 1.0, size=3)[:, None]
        mask |= shape

    image += rng.normal(0, 0.03, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask[None].astype(np.float64)


def generate_synthetic(
    out_dir: Union[str, os.PathLike], n: int, size: int, seed: int
) -> List[Tuple[pathlib.Path, pathlib.Path]]:
    """
    Writes ``n`` image/mask pairs to ``out_dir``. Sample ``i`` depends only on
    ``(seed, i)``, so a re-run with the same seed is byte-identical.

    :return: The written (image, mask) paths.
    :rtype: list[tuple[pathlib.Path, pathlib.Path]]

    :raises ConfigError: If ``n < 1`` or ``size < 32``.
    :raises DatasetError: On I/O failure.
    """

    if n < 1:
        raise ConfigError(f"Need at least one sample, not {n}")
    if size < MIN_SYNTHETIC_SIZE:
        raise ConfigError(f"Synthetic images must be at least {MIN_SYNTHETIC_SIZE} pixels, not {size}")

    out_dir = pathlib.Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Cannot create directory: {e.strerror or e}", str(out_dir)) from e

    written = []
    for index in range(n):
        image, mask = synthetic_sample(size, seed, index)
        image_path = out_dir / IMAGE_PATTERN.format(index=index)
        mask_path = out_dir / MASK_PATTERN.format(index=index)
        _pnm.write_pnm(image_path, image)
        _pnm.write_pnm(mask_path, mask)
        written.append((image_path, mask_path))
    logger.info("Generated %d synthetic %dx%d samples in %s (seed %d)", n, size, size, out_dir, seed)
    return written


# Loading


def resize_nearest(values: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a ``(c, h, w)`` array to ``(c, size, size)``."""

    _, height, width = values.shape
    if (height, width) == (size, size):
        return values
    rows = np.minimum(((np.arange(size) + 0.5) * height / size).astype(int), height - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * width / size).astype(int), width - 1)
    return values[:, rows][:, :, cols]


def load_sample(image_path: Union[str, os.PathLike], mask_path: Union[str, os.PathLike], size: Optional[int] = None):
    """
    Reads one pair. Masks are binarized at 0.5 after resizing.

    :raises DatasetError: On I/O failure, a wrong channel count or mismatched sizes.
    :raises PNMError: On a malformed file.
    """

    image = _pnm.read_pnm(image_path)
    mask = _pnm.read_pnm(mask_path)
    if image.shape[0] != 3 or mask.shape[0] != 1:
        raise DatasetError("Expected a P6 image and a P5 mask", os.fspath(image_path))
    if image.shape[1:] != mask.shape[1:]:
        raise DatasetError(f"Image {image.shape[1:]} and mask {mask.shape[1:]} differ in size", os.fspath(mask_path))
    if size is not None:
        image, mask = resize_nearest(image, size), resize_nearest(mask, size)
    mask = (mask >= 0.5).astype(np.float64)
    return Sample(Tensor(image[None]), Tensor(mask[None]), pathlib.Path(image_path).stem)


def load_dataset(directory: Union[str, os.PathLike], size: Optional[int] = None) -> List[Sample]:
    """
    Reads every ``img_*.ppm`` with its ``mask_*.pgm``, sorted by name.

    :raises DatasetError: If the directory is missing or empty, or an image has no mask.
    """

    directory = pathlib.Path(directory)
    if not directory.is_dir():
        raise DatasetError("Not a directory", str(directory))

    samples = []
    for image_path in sorted(directory.glob("img_*.ppm")):
        mask_path = directory / f"mask_{image_path.stem[len('img_'):]}.pgm"
        if not mask_path.exists():
            raise DatasetError(f"No mask for {image_path.name}", str(mask_path))
        samples.append(load_sample(image_path, mask_path, size))

    if not samples:
        raise DatasetError("No img_*.ppm files found", str(directory))
    logger.debug("Loaded %d samples from %s", len(samples), directory)
    return samples


def split_dataset(samples: Sequence[Sample], val_fraction: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
    """
    Deterministic train/held-out split. The held-out part has
    ``round(len * val_fraction)`` samples, but the training part always keeps one.

    :raises ConfigError: If ``val_fraction`` is outside [0, 1).
    """

    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), not {val_fraction}")
    held_out_count = min(int(round(len(samples) * val_fraction)), len(samples) - 1)
    if held_out_count <= 0:
        return list(samples), []

    order = np.random.default_rng(seed).permutation(len(samples))
    held_out = sorted(order[:held_out_count])
    train = sorted(order[held_out_count:])
    return [samples[index] for index in train], [samples[index] for index in held_out]
